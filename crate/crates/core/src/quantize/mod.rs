//! Post-training int8 quantization: calibration, affine parameters, integer
//! convolution and the TYQ1 model format.
//!
//! Weights are per-output-channel symmetric (zero point 0), activations
//! per-tensor asymmetric, biases int32 at scale `w_scale · in_scale`.

mod calib;
mod format;
mod model;
mod qconv;

pub use calib::{calibrate, calibrate_tensors, CalibMode, CalibrationStats, Histogram, TensorStats, HIST_BINS};
pub use format::{load_quantized, qmodel_from_bytes, qmodel_to_bytes, save_quantized, TYQ1_MAGIC, TYQ1_VERSION};
pub use model::{quantize_model, quantized_forward, QBlock, QNode, QuantizedModel};
pub use qconv::{
    accumulator_bound, qadd, qconcat, qconv2d, qconv2d_dequant, qmaxpool2d, qupsample_nearest2x,
    requantize, QConv, SiluLut,
};

use crate::error::{Error, Result};
use crate::tensor::{QuantParams, Tensor};

pub const QMIN: i32 = -128;
pub const QMAX: i32 = 127;

/// Round to nearest, ties to even, then clamp into int8.
#[inline]
pub(crate) fn to_i8(v: f64) -> i8 {
    v.round_ties_even().clamp(QMIN as f64, QMAX as f64) as i8
}

/// Asymmetric parameters covering `[min, max]` widened to include zero,
/// so real 0.0 is exactly representable.
pub fn qparams_from_range(min: f32, max: f32) -> Result<QuantParams> {
    if !(min.is_finite() && max.is_finite()) || min > max {
        return Err(Error::invalid(format!("bad calibration range [{min}, {max}]")));
    }
    let lo = min.min(0.0) as f64;
    let hi = max.max(0.0) as f64;
    if hi == lo {
        return QuantParams::new(1.0, 0);
    }
    let scale = ((hi - lo) / 255.0) as f32;
    let zp = (QMIN as f64 - 255.0 * lo / (hi - lo)).round_ties_even().clamp(QMIN as f64, QMAX as f64);
    QuantParams::new(scale, zp as i32)
}

#[inline]
pub(crate) fn quantize_value(x: f32, qp: QuantParams) -> i8 {
    to_i8((x as f64 / qp.scale as f64).round_ties_even() + qp.zero_point as f64)
}

#[inline]
pub(crate) fn dequantize_value(q: i8, qp: QuantParams) -> f32 {
    ((q as i32 - qp.zero_point) as f64 * qp.scale as f64) as f32
}

/// `q = clamp(round(x / scale) + zero_point, -128, 127)`.
pub fn quantize_tensor(x: &Tensor, qp: QuantParams) -> Result<Tensor> {
    qp.validate()?;
    let data = x.as_f32()?.iter().map(|&v| quantize_value(v, qp)).collect();
    Tensor::from_i8(x.dims(), data, qp)
}

/// `x̂ = (q - zero_point) · scale`.
pub fn dequantize(q: &Tensor) -> Result<Tensor> {
    let (data, qp) = q.as_i8()?;
    Tensor::from_f32(q.dims(), data.iter().map(|&v| dequantize_value(v, qp)).collect())
}

/// Per-channel symmetric weight scale, iterated to a fixed point of
/// `s -> (127·s)/127` so that dequantized weights re-quantize to the same
/// scale bit for bit.
pub(crate) fn weight_scale(max_abs: f32) -> f32 {
    if max_abs == 0.0 || !max_abs.is_finite() {
        return 1.0;
    }
    let mut s = max_abs / 127.0;
    for _ in 0..16 {
        let next = (127.0 * s) / 127.0;
        if next == s {
            break;
        }
        s = next;
    }
    s
}

/// Quantizes `[out_ch][per]` weights per output channel.
pub(crate) fn quantize_weights(weights: &[f32], out_ch: usize) -> (Vec<i8>, Vec<f32>) {
    let per = weights.len() / out_ch.max(1);
    let mut q = Vec::with_capacity(weights.len());
    let mut scales = Vec::with_capacity(out_ch);
    for row in weights.chunks(per.max(1)).take(out_ch) {
        let s = weight_scale(row.iter().fold(0.0f32, |m, v| m.max(v.abs())));
        scales.push(s);
        q.extend(row.iter().map(|&w| {
            (w as f64 / s as f64).round_ties_even().clamp(-127.0, 127.0) as i8
        }));
    }
    (q, scales)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Dims;

    #[test]
    fn symmetric_unit_range() {
        let qp = qparams_from_range(-1.0, 1.0).unwrap();
        assert!((qp.scale - 2.0 / 255.0).abs() < 1e-9);
        assert_eq!(qp.zero_point, 0);
    }

    #[test]
    fn zero_is_exact() {
        for (lo, hi) in [(-0.3, 5.0), (0.0, 1.0), (-7.0, -1.0), (2.0, 3.0)] {
            let qp = qparams_from_range(lo, hi).unwrap();
            let q = quantize_value(0.0, qp);
            assert_eq!(q as i32, qp.zero_point);
            assert_eq!(dequantize_value(q, qp), 0.0);
        }
    }

    #[test]
    fn ties_round_to_even() {
        let qp = QuantParams::new(1.0, 0).unwrap();
        assert_eq!(quantize_value(0.5, qp), 0);
        assert_eq!(quantize_value(1.5, qp), 2);
        assert_eq!(quantize_value(-2.5, qp), -2);
        assert_eq!(quantize_value(1e9, qp), 127);
        assert_eq!(quantize_value(-1e9, qp), -128);
    }

    #[test]
    fn tensor_roundtrip_within_half_scale() {
        let qp = qparams_from_range(-0.7, 2.3).unwrap();
        let xs: Vec<f32> = (0..=3000).map(|i| -0.7 + 3.0 * i as f32 / 3000.0).collect();
        let t = Tensor::from_f32(Dims::new(1, 1, 1, xs.len()), xs.clone()).unwrap();
        let back = dequantize(&quantize_tensor(&t, qp).unwrap()).unwrap();
        for (x, y) in xs.iter().zip(back.as_f32().unwrap()) {
            assert!(((x - y).abs() as f64) <= qp.scale as f64 / 2.0 + 1e-7);
        }
    }

    #[test]
    fn weight_scale_is_a_fixed_point() {
        for m in [0.123f32, 1.0, 3.3e-4, 77.7] {
            let s = weight_scale(m);
            assert_eq!(weight_scale(127.0 * s), s);
        }
        assert_eq!(weight_scale(0.0), 1.0);
    }

    #[test]
    fn per_channel_weights() {
        let (q, s) = quantize_weights(&[0.5, -1.0, 0.25, 0.0, 0.0, 0.0], 2);
        assert_eq!(&q[..3], &[64, -127, 32]);
        assert_eq!(&q[3..], &[0, 0, 0]);
        assert_eq!(s[1], 1.0);
    }
}
