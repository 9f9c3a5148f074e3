//! Dense tensor representation and the differentiable operator set.
//!
//! Tensors are rank-3 (height x width x channels) or rank-4
//! (batch x height x width x channels), stored row-major with channels
//! fastest. All arithmetic is f64: the gradient checks demand 64-bit
//! precision and desk-scale training is cheap enough not to need f32.

pub mod ops;
pub mod tape;

use crate::error::{Error, Result};

/// Dense real tensor. `data.len() == shape.iter().product()`, every
/// dimension at least 1, row-major with the channel axis fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::Shape("tensor must have rank >= 1".into()));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("all dimensions must be >= 1, got {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} expects {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// Scalar tensor of shape [1].
    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a scalar (shape [1]) tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Errors unless every entry is finite; `what` names the producing operator.
    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::Numeric(format!("{what} produced non-finite values")))
        }
    }

    /// Height/width/channels of a rank-3 tensor.
    pub fn hwc(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [h, w, c] => Ok((h, w, c)),
            _ => Err(Error::Shape(format!("expected rank-3 tensor, got shape {:?}", self.shape))),
        }
    }

    /// Batch/height/width/channels of a rank-4 tensor.
    pub fn nhwc(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, h, w, c] => Ok((n, h, w, c)),
            _ => Err(Error::Shape(format!("expected rank-4 tensor, got shape {:?}", self.shape))),
        }
    }

    /// View a rank-3 tensor as a single-image batch (rank 4). Rank-4 input
    /// passes through unchanged.
    pub fn to_batch(&self) -> Result<Tensor> {
        match self.rank() {
            3 => {
                let mut shape = vec![1];
                shape.extend_from_slice(&self.shape);
                Ok(Tensor {
                    shape,
                    data: self.data.clone(),
                })
            }
            4 => Ok(self.clone()),
            r => Err(Error::Shape(format!("expected rank 3 or 4, got rank {r}"))),
        }
    }

    /// Drop a leading batch dimension of size 1.
    pub fn squeeze_batch(self) -> Result<Tensor> {
        if self.rank() == 4 && self.shape[0] == 1 {
            Ok(Tensor {
                shape: self.shape[1..].to_vec(),
                data: self.data,
            })
        } else {
            Err(Error::Shape(format!("cannot squeeze batch from shape {:?}", self.shape)))
        }
    }

    /// Reinterpret with a new shape of identical element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} ({} elems) to {:?} ({} elems)",
                self.shape,
                self.len(),
                shape,
                n
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Round every entry through f32. Used to pin parameters at the archive's
    /// storage precision so save/load round trips are bit-exact.
    pub fn quantize_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }

    /// Flat index for rank-3 [h, w, c] access.
    #[inline(always)]
    pub fn idx3(&self, h: usize, w: usize, c: usize) -> usize {
        (h * self.shape[1] + w) * self.shape[2] + c
    }

    #[inline(always)]
    pub fn at3(&self, h: usize, w: usize, c: usize) -> f64 {
        self.data[(h * self.shape[1] + w) * self.shape[2] + c]
    }

    pub fn set3(&mut self, h: usize, w: usize, c: usize, v: f64) {
        let i = self.idx3(h, w, c);
        self.data[i] = v;
    }
}

/// Explicit per-side zero padding in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding {
    pub fn none() -> Self {
        Padding::default()
    }

    pub fn uniform(p: usize) -> Self {
        Padding {
            top: p,
            bottom: p,
            left: p,
            right: p,
        }
    }

    /// "Same" padding for an odd kernel at stride 1, computed by the caller.
    pub fn same(kh: usize, kw: usize) -> Self {
        Padding {
            top: (kh - 1) / 2,
            bottom: kh / 2,
            left: (kw - 1) / 2,
            right: kw / 2,
        }
    }
}

/// Convolution parameters: rank-4 filters (kh x kw x cin x cout), a bias of
/// length cout, stride, and explicit padding.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub filters: Tensor,
    pub bias: Tensor,
    pub stride: (usize, usize),
    pub padding: Padding,
}

impl ConvParams {
    pub fn new(filters: Tensor, bias: Tensor, stride: (usize, usize), padding: Padding) -> Result<Self> {
        if filters.rank() != 4 {
            return Err(Error::Shape(format!(
                "conv filters must be rank 4 (kh,kw,cin,cout), got {:?}",
                filters.shape()
            )));
        }
        let cout = filters.shape()[3];
        if bias.shape() != [cout] {
            return Err(Error::Shape(format!(
                "bias length {} does not match cout {}",
                bias.len(),
                cout
            )));
        }
        if stride.0 < 1 || stride.1 < 1 {
            return Err(Error::Shape("stride components must be >= 1".into()));
        }
        Ok(ConvParams {
            filters,
            bias,
            stride,
            padding,
        })
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.filters.shape()[0], self.filters.shape()[1])
    }

    pub fn cin(&self) -> usize {
        self.filters.shape()[2]
    }

    pub fn cout(&self) -> usize {
        self.filters.shape()[3]
    }
}
