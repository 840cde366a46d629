//! Straight loop-nest kernels. Slow on purpose: these are the ground truth the
//! optimized kernels and the integer convolution are checked against.

use super::{out_extent, BatchNorm, ConvSpec, Dims, Tensor};
use crate::error::{Error, Result};

pub fn conv2d(input: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    spec.validate()?;
    let x = input.as_f32()?;
    let d = input.dims();
    if d.c != spec.in_ch {
        return Err(Error::shape("channel mismatch"));
    }
    let (oh, ow) = spec.output_hw(d.h, d.w)?;
    let (kh, kw) = spec.kernel;
    let cin_g = spec.in_ch / spec.groups;
    let cout_g = spec.out_ch / spec.groups;
    let out_dims = Dims::new(d.n, spec.out_ch, oh, ow);
    let mut out = vec![0.0f32; out_dims.len()];
    for n in 0..d.n {
        for oc in 0..spec.out_ch {
            let g = oc / cout_g;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0f64;
                    for ic in 0..cin_g {
                        let c = g * cin_g + ic;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                                let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                                if iy < 0 || ix < 0 || iy >= d.h as isize || ix >= d.w as isize {
                                    continue;
                                }
                                let xv = x[((n * d.c + c) * d.h + iy as usize) * d.w + ix as usize];
                                let wv = spec.weights[((oc * cin_g + ic) * kh + ky) * kw + kx];
                                acc += xv as f64 * wv as f64;
                            }
                        }
                    }
                    out[((n * spec.out_ch + oc) * oh + oy) * ow + ox] =
                        (acc + spec.bias[oc] as f64) as f32;
                }
            }
        }
    }
    Tensor::from_f32(out_dims, out)
}

pub fn maxpool2d(input: &Tensor, k: usize, stride: usize, pad: usize) -> Result<Tensor> {
    let x = input.as_f32()?;
    let d = input.dims();
    let oh = out_extent(d.h, k, stride, pad).filter(|&v| v > 0);
    let ow = out_extent(d.w, k, stride, pad).filter(|&v| v > 0);
    let (Some(oh), Some(ow)) = (oh, ow) else {
        return Err(Error::shape("empty max-pool output"));
    };
    let out_dims = Dims::new(d.n, d.c, oh, ow);
    let mut out = Vec::with_capacity(out_dims.len());
    for n in 0..d.n {
        for c in 0..d.c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= d.h as isize || ix >= d.w as isize {
                                continue;
                            }
                            let v = x[((n * d.c + c) * d.h + iy as usize) * d.w + ix as usize];
                            if v > best {
                                best = v;
                            }
                        }
                    }
                    out.push(best);
                }
            }
        }
    }
    Tensor::from_f32(out_dims, out)
}

/// Inference batch-norm applied per channel: `γ·(x−mean)/√(var+eps) + β`.
pub fn batchnorm(input: &Tensor, bn: &BatchNorm) -> Result<Tensor> {
    let d = input.dims();
    bn.validate(d.c)?;
    let x = input.as_f32()?;
    let mut out = Vec::with_capacity(x.len());
    for (i, &v) in x.iter().enumerate() {
        let c = (i / d.plane()) % d.c;
        let inv = 1.0 / ((bn.var[c] + bn.eps) as f64).sqrt();
        out.push((bn.gamma[c] as f64 * (v as f64 - bn.mean[c] as f64) * inv + bn.beta[c] as f64) as f32);
    }
    Tensor::from_f32(d, out)
}
