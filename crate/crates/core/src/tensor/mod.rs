//! Dense NCHW tensors and the kernels the nano network is built from.
//!
//! Every kernel exists twice: an optimized version in [`kernels`] used by the
//! executors, and a direct loop-nest version in [`reference`] that the tests
//! hold the optimized path against.

pub mod kernels;
pub mod reference;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use kernels::{
    activation, concat_channels, conv2d, fold_batchnorm, maxpool2d, set_kernel_threads,
    kernel_threads, upsample_nearest2x, Activation,
};

/// Tensor extents in (n, c, h, w) order, `w` innermost.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Dims { n, c, h, w }
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn has_zero(&self) -> bool {
        self.n == 0 || self.c == 0 || self.h == 0 || self.w == 0
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{},{},{})", self.n, self.c, self.h, self.w)
    }
}

/// Affine int8 quantization parameters for a whole tensor:
/// `real = (q - zero_point) * scale`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: f32,
    pub zero_point: i32,
}

impl QuantParams {
    pub fn new(scale: f32, zero_point: i32) -> Result<Self> {
        let qp = QuantParams { scale, zero_point };
        qp.validate()?;
        Ok(qp)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(Error::invalid(format!(
                "quantization scale must be finite and > 0, got {}",
                self.scale
            )));
        }
        if !(-128..=127).contains(&self.zero_point) {
            return Err(Error::invalid(format!(
                "zero point {} outside [-128, 127]",
                self.zero_point
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    I8,
}

impl DType {
    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::I8 => "i8",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Storage {
    F32(Vec<f32>),
    I8 { data: Vec<i8>, qparams: QuantParams },
}

/// Dense 4-D tensor. Quantization parameters travel with (and only with) int8
/// data, so the "qparams iff i8" rule holds by construction.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Dims,
    storage: Storage,
}

impl Tensor {
    pub fn from_f32(dims: Dims, data: Vec<f32>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::shape(format!(
                "buffer of {} elements does not fit dims {dims}",
                data.len()
            )));
        }
        Ok(Tensor {
            dims,
            storage: Storage::F32(data),
        })
    }

    pub fn from_i8(dims: Dims, data: Vec<i8>, qparams: QuantParams) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::shape(format!(
                "buffer of {} elements does not fit dims {dims}",
                data.len()
            )));
        }
        qparams.validate()?;
        Ok(Tensor {
            dims,
            storage: Storage::I8 { data, qparams },
        })
    }

    pub fn zeros(dims: Dims) -> Self {
        Tensor {
            dims,
            storage: Storage::F32(vec![0.0; dims.len()]),
        }
    }

    pub fn full(dims: Dims, value: f32) -> Self {
        Tensor {
            dims,
            storage: Storage::F32(vec![value; dims.len()]),
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.dims.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dims.is_empty()
    }

    pub fn dtype(&self) -> DType {
        match self.storage {
            Storage::F32(_) => DType::F32,
            Storage::I8 { .. } => DType::I8,
        }
    }

    pub fn qparams(&self) -> Option<QuantParams> {
        match self.storage {
            Storage::F32(_) => None,
            Storage::I8 { qparams, .. } => Some(qparams),
        }
    }

    pub fn as_f32(&self) -> Result<&[f32]> {
        match &self.storage {
            Storage::F32(v) => Ok(v),
            Storage::I8 { .. } => Err(Error::DType {
                expected: "f32",
                actual: "i8",
            }),
        }
    }

    pub fn as_f32_mut(&mut self) -> Result<&mut [f32]> {
        match &mut self.storage {
            Storage::F32(v) => Ok(v),
            Storage::I8 { .. } => Err(Error::DType {
                expected: "f32",
                actual: "i8",
            }),
        }
    }

    pub fn as_i8(&self) -> Result<(&[i8], QuantParams)> {
        match &self.storage {
            Storage::I8 { data, qparams } => Ok((data, *qparams)),
            Storage::F32(_) => Err(Error::DType {
                expected: "i8",
                actual: "f32",
            }),
        }
    }

    pub fn into_f32(self) -> Result<Vec<f32>> {
        match self.storage {
            Storage::F32(v) => Ok(v),
            Storage::I8 { .. } => Err(Error::DType {
                expected: "f32",
                actual: "i8",
            }),
        }
    }

    pub fn into_i8(self) -> Result<(Vec<i8>, QuantParams)> {
        match self.storage {
            Storage::I8 { data, qparams } => Ok((data, qparams)),
            Storage::F32(_) => Err(Error::DType {
                expected: "i8",
                actual: "f32",
            }),
        }
    }

    /// Value at (n, c, y, x) of an f32 tensor. Panics on out-of-range indices.
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f32 {
        let d = self.dims;
        let idx = ((n * d.c + c) * d.h + y) * d.w + x;
        match &self.storage {
            Storage::F32(v) => v[idx],
            Storage::I8 { data, qparams } => {
                (data[idx] as i32 - qparams.zero_point) as f32 * qparams.scale
            }
        }
    }

    pub(crate) fn require_f32(&self) -> Result<&[f32]> {
        self.as_f32()
    }

    pub(crate) fn require_nonempty(&self) -> Result<()> {
        if self.dims.has_zero() {
            return Err(Error::shape(format!("zero-sized tensor {}", self.dims)));
        }
        Ok(())
    }
}

/// Convolution parameters with weights laid out `[out_ch, in_ch/groups, kh, kw]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

impl ConvSpec {
    /// Zero-initialized spec with validated geometry.
    pub fn zeros(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Self> {
        let spec = ConvSpec {
            in_ch,
            out_ch,
            kernel: (kernel, kernel),
            stride,
            padding,
            groups,
            weights: vec![0.0; weight_len(in_ch, out_ch, (kernel, kernel), groups.max(1))],
            bias: vec![0.0; out_ch],
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn weight_len(&self) -> usize {
        weight_len(self.in_ch, self.out_ch, self.kernel, self.groups)
    }

    /// Elements in one output channel's filter.
    pub fn fan_in(&self) -> usize {
        self.in_ch / self.groups * self.kernel.0 * self.kernel.1
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 || !self.in_ch.is_multiple_of(self.groups) || !self.out_ch.is_multiple_of(self.groups) {
            return Err(Error::invalid(format!(
                "channels {}->{} not divisible by groups {}",
                self.in_ch, self.out_ch, self.groups
            )));
        }
        if self.in_ch == 0 || self.out_ch == 0 || self.kernel.0 == 0 || self.kernel.1 == 0 {
            return Err(Error::invalid("conv dimensions must be positive"));
        }
        if self.stride == 0 {
            return Err(Error::invalid("conv stride must be positive"));
        }
        if self.weights.len() != self.weight_len() {
            return Err(Error::shape(format!(
                "conv weight buffer has {} elements, expected {}",
                self.weights.len(),
                self.weight_len()
            )));
        }
        if self.bias.len() != self.out_ch {
            return Err(Error::shape(format!(
                "conv bias has {} elements, expected {}",
                self.bias.len(),
                self.out_ch
            )));
        }
        Ok(())
    }

    /// Output spatial size for an `h x w` input, or an error if it would be empty.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let oh = out_extent(h, self.kernel.0, self.stride, self.padding);
        let ow = out_extent(w, self.kernel.1, self.stride, self.padding);
        match (oh, ow) {
            (Some(oh), Some(ow)) if oh > 0 && ow > 0 => Ok((oh, ow)),
            _ => Err(Error::shape(format!(
                "conv {}x{} stride {} pad {} yields empty output on {h}x{w}",
                self.kernel.0, self.kernel.1, self.stride, self.padding
            ))),
        }
    }
}

fn weight_len(in_ch: usize, out_ch: usize, kernel: (usize, usize), groups: usize) -> usize {
    out_ch * (in_ch / groups.max(1)) * kernel.0 * kernel.1
}

/// `floor((len + 2*pad - k) / stride) + 1`, `None` when the window does not fit.
pub(crate) fn out_extent(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if padded < k || stride == 0 {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// Inference-mode batch-norm parameters for one conv output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub eps: f32,
}

impl BatchNorm {
    pub fn identity(channels: usize, eps: f32) -> Self {
        BatchNorm {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            eps,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        let lens = [
            self.gamma.len(),
            self.beta.len(),
            self.mean.len(),
            self.var.len(),
        ];
        if lens.iter().any(|&l| l != channels) {
            return Err(Error::shape(format!(
                "batch-norm arrays {lens:?} do not match {channels} channels"
            )));
        }
        if self.var.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::invalid("batch-norm variance must be >= 0"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn buffer_length_must_match_dims() {
        assert!(Tensor::from_f32(Dims::new(1, 2, 3, 4), vec![0.0; 24]).is_ok());
        assert!(matches!(
            Tensor::from_f32(Dims::new(1, 2, 3, 4), vec![0.0; 23]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn qparams_only_on_int8() {
        let f = Tensor::zeros(Dims::new(1, 1, 2, 2));
        assert_eq!(f.qparams(), None);
        let q = Tensor::from_i8(
            Dims::new(1, 1, 2, 2),
            vec![0; 4],
            QuantParams::new(0.5, 3).unwrap(),
        )
        .unwrap();
        assert_eq!(q.qparams().unwrap().zero_point, 3);
        assert!(q.as_f32().is_err());
        assert!(f.as_i8().is_err());
    }

    #[test]
    fn qparams_validation() {
        assert!(QuantParams::new(0.0, 0).is_err());
        assert!(QuantParams::new(f32::NAN, 0).is_err());
        assert!(QuantParams::new(1.0, 128).is_err());
        assert!(QuantParams::new(1.0, -128).is_ok());
    }

    #[test]
    fn conv_spec_group_divisibility() {
        assert!(ConvSpec::zeros(4, 6, 3, 1, 1, 2).is_ok());
        assert!(ConvSpec::zeros(4, 6, 3, 1, 1, 3).is_err());
        let mut s = ConvSpec::zeros(2, 2, 1, 1, 0, 1).unwrap();
        s.weights.pop();
        assert!(s.validate().is_err());
    }

    #[test]
    fn output_extent_formula() {
        let s = ConvSpec::zeros(3, 16, 6, 2, 2, 1).unwrap();
        assert_eq!(s.output_hw(640, 640).unwrap(), (320, 320));
        let s = ConvSpec::zeros(3, 3, 5, 1, 0, 1).unwrap();
        assert!(s.output_hw(4, 4).is_err());
    }
}
