use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;

use super::{out_extent, BatchNorm, ConvSpec, Dims, Tensor};
use crate::error::{Error, Result};

static KERNEL_THREADS: AtomicUsize = AtomicUsize::new(1);

/// Number of threads conv2d may split output channels across. 1 (the
/// default) keeps every kernel on the calling thread.
pub fn set_kernel_threads(threads: usize) {
    KERNEL_THREADS.store(threads.max(1), Ordering::Relaxed);
}

pub fn kernel_threads() -> usize {
    KERNEL_THREADS.load(Ordering::Relaxed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Silu,
    Sigmoid,
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn silu(x: f32) -> f32 {
    x * sigmoid(x)
}

pub fn activation(input: &Tensor, kind: Activation) -> Result<Tensor> {
    let mut out = input.clone();
    activation_inplace(&mut out, kind)?;
    Ok(out)
}

pub fn activation_inplace(t: &mut Tensor, kind: Activation) -> Result<()> {
    let data = t.as_f32_mut()?;
    match kind {
        Activation::Silu => data.iter_mut().for_each(|v| *v = silu(*v)),
        Activation::Sigmoid => data.iter_mut().for_each(|v| *v = sigmoid(*v)),
    }
    Ok(())
}

/// Cross-correlation plus bias, via im2col + SGEMM per group.
pub fn conv2d(input: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    spec.validate()?;
    let x = input.require_f32()?;
    input.require_nonempty()?;
    let d = input.dims();
    if d.c != spec.in_ch {
        return Err(Error::shape(format!(
            "conv expects {} input channels, got {}",
            spec.in_ch, d.c
        )));
    }
    let (oh, ow) = spec.output_hw(d.h, d.w)?;
    let out_dims = Dims::new(d.n, spec.out_ch, oh, ow);
    let mut out = vec![0.0f32; out_dims.len()];

    let cin_g = spec.in_ch / spec.groups;
    let cout_g = spec.out_ch / spec.groups;
    let (kh, kw) = spec.kernel;
    let k = cin_g * kh * kw;
    let n_cols = oh * ow;
    let direct = kh == 1 && kw == 1 && spec.stride == 1 && spec.padding == 0;
    let mut col = if direct { Vec::new() } else { vec![0.0f32; k * n_cols] };

    for b in 0..d.n {
        for g in 0..spec.groups {
            let in_off = (b * d.c + g * cin_g) * d.plane();
            let group_in = &x[in_off..in_off + cin_g * d.plane()];
            let cols: &[f32] = if direct {
                group_in
            } else {
                im2col(group_in, cin_g, d.h, d.w, spec, oh, ow, &mut col);
                &col
            };
            let w_off = g * cout_g * k;
            let weights = &spec.weights[w_off..w_off + cout_g * k];
            let out_off = (b * spec.out_ch + g * cout_g) * n_cols;
            let dst = &mut out[out_off..out_off + cout_g * n_cols];
            let bias = &spec.bias[g * cout_g..(g + 1) * cout_g];
            gemm_bias(weights, cols, bias, dst, cout_g, k, n_cols);
        }
    }
    Tensor::from_f32(out_dims, out)
}

/// `dst[m x n] = a[m x k] * b[k x n] + bias[m]` (row-major).
fn gemm_bias(a: &[f32], b: &[f32], bias: &[f32], dst: &mut [f32], m: usize, k: usize, n: usize) {
    let threads = kernel_threads();
    let run = |rows: std::ops::Range<usize>, dst: &mut [f32]| {
        for (r, row) in rows.clone().zip(dst.chunks_exact_mut(n)) {
            row.fill(bias[r]);
        }
        let m_rows = rows.len();
        // SAFETY: slices are sized m_rows*k, k*n and m_rows*n with row-major strides.
        unsafe {
            matrixmultiply::sgemm(
                m_rows,
                k,
                n,
                1.0,
                a[rows.start * k..].as_ptr(),
                k as isize,
                1,
                b.as_ptr(),
                n as isize,
                1,
                1.0,
                dst.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    };
    if threads <= 1 || m < 2 * threads {
        run(0..m, dst);
        return;
    }
    let chunk = m.div_ceil(threads);
    dst.par_chunks_mut(chunk * n)
        .enumerate()
        .for_each(|(i, part)| {
            let start = i * chunk;
            run(start..start + part.len() / n, part);
        });
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f32],
    channels: usize,
    h: usize,
    w: usize,
    spec: &ConvSpec,
    oh: usize,
    ow: usize,
    col: &mut [f32],
) {
    let (kh, kw) = spec.kernel;
    let s = spec.stride;
    let p = spec.padding as isize;
    let mut row = 0;
    for c in 0..channels {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let dst = &mut col[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * s) as isize + ky as isize - p;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * s) as isize + kx as isize - p;
                        *v = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// k x k max-pool with −∞ padding, computed as a row pass then a column pass.
pub fn maxpool2d(input: &Tensor, k: usize, stride: usize, pad: usize) -> Result<Tensor> {
    let x = input.require_f32()?;
    input.require_nonempty()?;
    if k == 0 || stride == 0 {
        return Err(Error::invalid("max-pool kernel and stride must be >= 1"));
    }
    let d = input.dims();
    let (oh, ow) = match (
        out_extent(d.h, k, stride, pad),
        out_extent(d.w, k, stride, pad),
    ) {
        (Some(oh), Some(ow)) if oh > 0 && ow > 0 => (oh, ow),
        _ => {
            return Err(Error::shape(format!(
                "max-pool k={k} stride={stride} pad={pad} yields empty output on {}x{}",
                d.h, d.w
            )))
        }
    };
    let out_dims = Dims::new(d.n, d.c, oh, ow);
    let mut out = vec![0.0f32; out_dims.len()];
    // Horizontal pass result: h rows x ow columns per plane.
    let mut rows = vec![0.0f32; d.h * ow];
    for (plane, dst) in x.chunks_exact(d.plane()).zip(out.chunks_exact_mut(oh * ow)) {
        for y in 0..d.h {
            let src = &plane[y * d.w..(y + 1) * d.w];
            for ox in 0..ow {
                let start = (ox * stride) as isize - pad as isize;
                let lo = start.max(0) as usize;
                let hi = ((start + k as isize) as usize).min(d.w);
                rows[y * ow + ox] = window_max(&src[lo.min(hi)..hi]);
            }
        }
        for oy in 0..oh {
            let start = (oy * stride) as isize - pad as isize;
            let lo = start.max(0) as usize;
            let hi = ((start + k as isize) as usize).min(d.h);
            let line = &mut dst[oy * ow..(oy + 1) * ow];
            line.fill(f32::NEG_INFINITY);
            for y in lo..hi {
                for (o, &v) in line.iter_mut().zip(&rows[y * ow..(y + 1) * ow]) {
                    if v > *o {
                        *o = v;
                    }
                }
            }
        }
    }
    Tensor::from_f32(out_dims, out)
}

#[inline]
fn window_max(vals: &[f32]) -> f32 {
    vals.iter().copied().fold(f32::NEG_INFINITY, f32::max)
}

pub fn upsample_nearest2x(input: &Tensor) -> Result<Tensor> {
    let x = input.require_f32()?;
    let d = input.dims();
    let out_dims = Dims::new(d.n, d.c, d.h * 2, d.w * 2);
    let mut out = vec![0.0f32; out_dims.len()];
    let ow = d.w * 2;
    for (src, dst) in x
        .chunks_exact(d.plane().max(1))
        .zip(out.chunks_exact_mut((4 * d.plane()).max(1)))
    {
        for y in 0..d.h {
            let line = &mut dst[2 * y * ow..(2 * y + 1) * ow];
            for (xx, &v) in src[y * d.w..(y + 1) * d.w].iter().enumerate() {
                line[2 * xx] = v;
                line[2 * xx + 1] = v;
            }
            dst.copy_within(2 * y * ow..(2 * y + 1) * ow, (2 * y + 1) * ow);
        }
    }
    Tensor::from_f32(out_dims, out)
}

pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (da, db) = (a.dims(), b.dims());
    if da.n != db.n || da.h != db.h || da.w != db.w {
        return Err(Error::shape(format!(
            "concat operands disagree spatially: {da} vs {db}"
        )));
    }
    let (xa, xb) = (a.require_f32()?, b.require_f32()?);
    let out_dims = Dims::new(da.n, da.c + db.c, da.h, da.w);
    let mut out = Vec::with_capacity(out_dims.len());
    let (sa, sb) = (da.c * da.plane(), db.c * db.plane());
    for n in 0..da.n {
        out.extend_from_slice(&xa[n * sa..(n + 1) * sa]);
        out.extend_from_slice(&xb[n * sb..(n + 1) * sb]);
    }
    Tensor::from_f32(out_dims, out)
}

/// Folds inference batch-norm into the preceding conv:
/// `w' = w·γ/√(var+eps)`, `b' = (b−mean)·γ/√(var+eps) + β`.
pub fn fold_batchnorm(spec: &ConvSpec, bn: &BatchNorm) -> Result<ConvSpec> {
    spec.validate()?;
    bn.validate(spec.out_ch)?;
    let per_out = spec.weight_len() / spec.out_ch;
    let mut folded = spec.clone();
    for oc in 0..spec.out_ch {
        let factor = bn.gamma[oc] / (bn.var[oc] + bn.eps).sqrt();
        for w in &mut folded.weights[oc * per_out..(oc + 1) * per_out] {
            *w *= factor;
        }
        folded.bias[oc] = (spec.bias[oc] - bn.mean[oc]) * factor + bn.beta[oc];
    }
    Ok(folded)
}
