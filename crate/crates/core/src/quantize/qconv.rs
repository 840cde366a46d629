use serde::{Deserialize, Serialize};

use super::{dequantize_value, quantize_value, to_i8};
use crate::error::{Error, Result};
use crate::tensor::{out_extent, kernels::silu, ConvSpec, Dims, QuantParams, Tensor};

/// Integer convolution: per-output-channel symmetric int8 weights and an
/// int32 bias at scale `w_scales[c] · input.scale`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QConv {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub weights: Vec<i8>,
    pub w_scales: Vec<f32>,
    pub bias: Vec<i32>,
    pub input: QuantParams,
    pub output: QuantParams,
}

/// Worst-case |accumulator| for a reduction length `k`: every
/// `(q_in - z_in)` at 255 against every weight at 127, plus the bias.
pub fn accumulator_bound(k: usize, max_bias: i64) -> i64 {
    k as i64 * 255 * 127 + max_bias
}

impl QConv {
    /// Quantizes a float conv whose input and output activations carry the
    /// given parameters.
    pub fn from_float(spec: &ConvSpec, input: QuantParams, output: QuantParams) -> Result<Self> {
        spec.validate()?;
        let (weights, w_scales) = super::quantize_weights(&spec.weights, spec.out_ch);
        let k = spec.fan_in();
        let headroom = i32::MAX as i64 - accumulator_bound(k, 0);
        if headroom <= 0 {
            return Err(Error::invalid(format!("reduction length {k} can overflow int32")));
        }
        let bias = spec
            .bias
            .iter()
            .zip(&w_scales)
            .map(|(&b, &s)| {
                let bs = (s * input.scale) as f64;
                (b as f64 / bs).round_ties_even().clamp(-headroom as f64, headroom as f64) as i32
            })
            .collect();
        let q = QConv {
            in_ch: spec.in_ch,
            out_ch: spec.out_ch,
            kernel: spec.kernel,
            stride: spec.stride,
            padding: spec.padding,
            groups: spec.groups,
            weights,
            w_scales,
            bias,
            input,
            output,
        };
        q.validate()?;
        Ok(q)
    }

    pub fn fan_in(&self) -> usize {
        (self.in_ch / self.groups) * self.kernel.0 * self.kernel.1
    }

    pub fn validate(&self) -> Result<()> {
        let geometry_ok = self.groups > 0
            && self.in_ch.is_multiple_of(self.groups)
            && self.out_ch.is_multiple_of(self.groups)
            && self.stride > 0
            && self.kernel.0 > 0
            && self.kernel.1 > 0;
        if !geometry_ok
            || self.weights.len() != self.out_ch * self.fan_in()
            || self.w_scales.len() != self.out_ch
            || self.bias.len() != self.out_ch
        {
            return Err(Error::Corrupt("quantized conv arrays do not match its geometry".into()));
        }
        self.input.validate()?;
        self.output.validate()?;
        if self.w_scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Corrupt("non-positive weight scale".into()));
        }
        let max_bias = self.bias.iter().map(|b| (*b as i64).abs()).max().unwrap_or(0);
        if accumulator_bound(self.fan_in(), max_bias) > i32::MAX as i64 {
            return Err(Error::Corrupt("int32 accumulator bound exceeded".into()));
        }
        Ok(())
    }

    /// Float spec with dequantized weights and bias.
    pub fn dequantized(&self) -> ConvSpec {
        let per = self.fan_in();
        let weights = self
            .weights
            .iter()
            .enumerate()
            .map(|(i, &q)| (q as f64 * self.w_scales[i / per] as f64) as f32)
            .collect();
        let bias = self
            .bias
            .iter()
            .zip(&self.w_scales)
            .map(|(&b, &s)| (b as f64 * (s * self.input.scale) as f64) as f32)
            .collect();
        ConvSpec {
            in_ch: self.in_ch,
            out_ch: self.out_ch,
            kernel: self.kernel,
            stride: self.stride,
            padding: self.padding,
            groups: self.groups,
            weights,
            bias,
        }
    }

    /// Raw int32 accumulators `[out_ch][oh·ow]` including the bias.
    fn accumulate(&self, input: &Tensor) -> Result<(Vec<i32>, usize, usize)> {
        let (x, qp) = input.as_i8()?;
        if qp != self.input {
            return Err(Error::QParamsMismatch(format!(
                "conv expects input {:?}, got {:?}",
                self.input, qp
            )));
        }
        let d = input.dims();
        if d.n != 1 || d.c != self.in_ch {
            return Err(Error::shape(format!("conv expects {} input channels, got {d}", self.in_ch)));
        }
        let (kh, kw) = self.kernel;
        let (oh, ow) = match (
            out_extent(d.h, kh, self.stride, self.padding),
            out_extent(d.w, kw, self.stride, self.padding),
        ) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::shape(format!("kernel {kh}x{kw} does not fit input {d}"))),
        };
        let p = oh * ow;
        let cin_g = self.in_ch / self.groups;
        let cout_g = self.out_ch / self.groups;
        let k = self.fan_in();
        let z = qp.zero_point;
        let mut acc = vec![0i32; self.out_ch * p];
        // Zero-point-shifted im2col per group; padding is real zero, i.e. shifted 0.
        let mut col = vec![0i16; k * p];
        let direct = kh == 1 && kw == 1 && self.stride == 1 && self.padding == 0;
        for grp in 0..self.groups {
            if direct {
                for ci in 0..cin_g {
                    let src = &x[(grp * cin_g + ci) * d.plane()..][..p];
                    for (c, &v) in col[ci * p..(ci + 1) * p].iter_mut().zip(src) {
                        *c = (v as i32 - z) as i16;
                    }
                }
            } else {
                col.fill(0);
                for ci in 0..cin_g {
                    let plane = &x[(grp * cin_g + ci) * d.plane()..][..d.plane()];
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let row = &mut col[((ci * kh + ky) * kw + kx) * p..][..p];
                            for oy in 0..oh {
                                let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                                if iy < 0 || iy >= d.h as isize {
                                    continue;
                                }
                                let src = &plane[iy as usize * d.w..][..d.w];
                                for ox in 0..ow {
                                    let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                                    if ix >= 0 && ix < d.w as isize {
                                        row[oy * ow + ox] = (src[ix as usize] as i32 - z) as i16;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            for oc in grp * cout_g..(grp + 1) * cout_g {
                let out = &mut acc[oc * p..(oc + 1) * p];
                out.fill(self.bias[oc]);
                let w = &self.weights[oc * k..(oc + 1) * k];
                for (kk, &wv) in w.iter().enumerate() {
                    if wv == 0 {
                        continue;
                    }
                    let wv = wv as i32;
                    for (o, &c) in out.iter_mut().zip(&col[kk * p..(kk + 1) * p]) {
                        *o += wv * c as i32;
                    }
                }
            }
        }
        Ok((acc, oh, ow))
    }
}

/// Integer conv requantized to `spec.output` with round-half-to-even.
pub fn qconv2d(input: &Tensor, spec: &QConv) -> Result<Tensor> {
    let (acc, oh, ow) = spec.accumulate(input)?;
    let p = oh * ow;
    let zo = spec.output.zero_point as f64;
    let mut out = Vec::with_capacity(acc.len());
    for (oc, chunk) in acc.chunks(p.max(1)).enumerate().take(spec.out_ch) {
        let m = spec.w_scales[oc] as f64 * spec.input.scale as f64 / spec.output.scale as f64;
        out.extend(chunk.iter().map(|&a| to_i8((a as f64 * m).round_ties_even() + zo)));
    }
    Tensor::from_i8(Dims::new(1, spec.out_ch, oh, ow), out, spec.output)
}

/// Integer conv dequantized straight from the accumulator (head outputs).
pub fn qconv2d_dequant(input: &Tensor, spec: &QConv) -> Result<Tensor> {
    let (acc, oh, ow) = spec.accumulate(input)?;
    let p = oh * ow;
    let mut out = Vec::with_capacity(acc.len());
    for (oc, chunk) in acc.chunks(p.max(1)).enumerate().take(spec.out_ch) {
        let m = spec.w_scales[oc] as f64 * spec.input.scale as f64;
        out.extend(chunk.iter().map(|&a| (a as f64 * m) as f32));
    }
    Tensor::from_f32(Dims::new(1, spec.out_ch, oh, ow), out)
}

/// SiLU over the int8 domain as a 256-entry table.
#[derive(Clone, Debug, PartialEq)]
pub struct SiluLut {
    pub input: QuantParams,
    pub output: QuantParams,
    table: [i8; 256],
}

impl SiluLut {
    pub fn new(input: QuantParams, output: QuantParams) -> Self {
        let mut table = [0i8; 256];
        for (i, t) in table.iter_mut().enumerate() {
            let q = i as i32 - 128;
            *t = quantize_value(silu(dequantize_value(q as i8, input)), output);
        }
        SiluLut { input, output, table }
    }

    #[inline]
    pub fn lookup(&self, q: i8) -> i8 {
        self.table[(q as i32 + 128) as usize]
    }

    pub fn apply(&self, t: &Tensor) -> Result<Tensor> {
        let (x, qp) = t.as_i8()?;
        if qp != self.input {
            return Err(Error::QParamsMismatch(format!(
                "activation table expects {:?}, got {:?}",
                self.input, qp
            )));
        }
        Tensor::from_i8(t.dims(), x.iter().map(|&q| self.lookup(q)).collect(), self.output)
    }
}

/// Re-expresses an int8 tensor under different parameters.
pub fn requantize(t: &Tensor, to: QuantParams) -> Result<Tensor> {
    let (x, from) = t.as_i8()?;
    if from == to {
        return Ok(t.clone());
    }
    let m = from.scale as f64 / to.scale as f64;
    let (zf, zt) = (from.zero_point, to.zero_point as f64);
    let mut lut = [0i8; 256];
    for (i, l) in lut.iter_mut().enumerate() {
        *l = to_i8(((i as i32 - 128 - zf) as f64 * m).round_ties_even() + zt);
    }
    Tensor::from_i8(t.dims(), x.iter().map(|&q| lut[(q as i32 + 128) as usize]).collect(), to)
}

/// Channel concat with both operands brought to `out`.
pub fn qconcat(a: &Tensor, b: &Tensor, out: QuantParams) -> Result<Tensor> {
    let (da, db) = (a.dims(), b.dims());
    if da.n != 1 || db.n != 1 || da.h != db.h || da.w != db.w {
        return Err(Error::shape(format!("cannot concat {da} with {db}")));
    }
    let a = requantize(a, out)?;
    let b = requantize(b, out)?;
    let mut data = a.as_i8()?.0.to_vec();
    data.extend_from_slice(b.as_i8()?.0);
    Tensor::from_i8(Dims::new(1, da.c + db.c, da.h, da.w), data, out)
}

/// Elementwise sum of two int8 tensors, quantized to `out`.
pub fn qadd(a: &Tensor, b: &Tensor, out: QuantParams) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("cannot add {} and {}", a.dims(), b.dims())));
    }
    let (xa, qa) = a.as_i8()?;
    let (xb, qb) = b.as_i8()?;
    let (sa, sb, so) = (qa.scale as f64, qb.scale as f64, out.scale as f64);
    let zo = out.zero_point as f64;
    let data = xa
        .iter()
        .zip(xb)
        .map(|(&u, &v)| {
            let real = (u as i32 - qa.zero_point) as f64 * sa + (v as i32 - qb.zero_point) as f64 * sb;
            to_i8((real / so).round_ties_even() + zo)
        })
        .collect();
    Tensor::from_i8(a.dims(), data, out)
}

/// Max pooling in the int8 domain; padding is the lowest code, which sits
/// at or below every real value under the tensor's parameters.
pub fn qmaxpool2d(t: &Tensor, k: usize, stride: usize, pad: usize) -> Result<Tensor> {
    let (x, qp) = t.as_i8()?;
    let d = t.dims();
    let (oh, ow) = match (out_extent(d.h, k, stride, pad), out_extent(d.w, k, stride, pad)) {
        (Some(a), Some(b)) if pad < k => (a, b),
        _ => return Err(Error::shape(format!("pool {k} does not fit {d}"))),
    };
    let mut out = vec![i8::MIN; d.n * d.c * oh * ow];
    for plane in 0..d.n * d.c {
        let src = &x[plane * d.plane()..][..d.plane()];
        let dst = &mut out[plane * oh * ow..][..oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut m = i8::MIN;
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < d.w as isize {
                            m = m.max(src[iy as usize * d.w + ix as usize]);
                        }
                    }
                }
                dst[oy * ow + ox] = m;
            }
        }
    }
    Tensor::from_i8(Dims::new(d.n, d.c, oh, ow), out, qp)
}

pub fn qupsample_nearest2x(t: &Tensor) -> Result<Tensor> {
    let (x, qp) = t.as_i8()?;
    let d = t.dims();
    let (oh, ow) = (2 * d.h, 2 * d.w);
    let mut out = Vec::with_capacity(d.n * d.c * oh * ow);
    for plane in x.chunks(d.plane().max(1)).take(d.n * d.c) {
        for y in 0..oh {
            let row = &plane[(y / 2) * d.w..][..d.w];
            for xx in 0..ow {
                out.push(row[xx / 2]);
            }
        }
    }
    Tensor::from_i8(Dims::new(d.n, d.c, oh, ow), out, qp)
}
