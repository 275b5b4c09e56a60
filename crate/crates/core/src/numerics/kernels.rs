//! Slice-level forward/backward kernels shared by the tape and by the
//! standalone tensor functions. All reductions run in a fixed row-major
//! order so repeated calls are bit-identical.

use super::{Scalar, Tensor};
use crate::error::{ensure, Error, Result};

/// Geometry of a batched 2x2 stride-2 convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    /// Spatial size of the fine (high-resolution) side.
    pub height: usize,
    pub width: usize,
}

impl ConvDims {
    fn coarse(&self) -> (usize, usize) {
        (self.height / 2, self.width / 2)
    }
}

/// `out[b,o,i,j] = bias[o] + sum_{c,a,e} k[o,c,a,e] x[b,c,2i+a,2j+e]`
pub(crate) fn conv_forward<T: Scalar>(d: ConvDims, x: &[T], k: &[T], bias: &[T], out: &mut [T]) {
    let (oh, ow) = d.coarse();
    let (h, w) = (d.height, d.width);
    let patch_len = d.c_in * 4;
    let mut patch = vec![T::zero(); patch_len];
    for b in 0..d.batch {
        let xb = &x[b * d.c_in * h * w..(b + 1) * d.c_in * h * w];
        let ob = &mut out[b * d.c_out * oh * ow..(b + 1) * d.c_out * oh * ow];
        for i in 0..oh {
            for j in 0..ow {
                for c in 0..d.c_in {
                    for a in 0..2 {
                        for e in 0..2 {
                            patch[c * 4 + a * 2 + e] = xb[c * h * w + (2 * i + a) * w + 2 * j + e];
                        }
                    }
                }
                for o in 0..d.c_out {
                    let ko = &k[o * patch_len..(o + 1) * patch_len];
                    let mut acc = bias[o];
                    for (kv, pv) in ko.iter().zip(&patch) {
                        acc += *kv * *pv;
                    }
                    ob[o * oh * ow + i * ow + j] = acc;
                }
            }
        }
    }
}

/// Accumulates input, kernel and bias adjoints of [`conv_forward`].
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward<T: Scalar>(
    d: ConvDims,
    x: &[T],
    k: &[T],
    dout: &[T],
    mut dx: Option<&mut [T]>,
    mut dk: Option<&mut [T]>,
    mut dbias: Option<&mut [T]>,
) {
    let (oh, ow) = d.coarse();
    let (h, w) = (d.height, d.width);
    let patch_len = d.c_in * 4;
    for b in 0..d.batch {
        let xoff = b * d.c_in * h * w;
        let ooff = b * d.c_out * oh * ow;
        for o in 0..d.c_out {
            for i in 0..oh {
                for j in 0..ow {
                    let g = dout[ooff + o * oh * ow + i * ow + j];
                    if let Some(db) = dbias.as_deref_mut() {
                        db[o] += g;
                    }
                    for c in 0..d.c_in {
                        for a in 0..2 {
                            for e in 0..2 {
                                let xi = xoff + c * h * w + (2 * i + a) * w + 2 * j + e;
                                let ki = o * patch_len + c * 4 + a * 2 + e;
                                if let Some(dk) = dk.as_deref_mut() {
                                    dk[ki] += g * x[xi];
                                }
                                if let Some(dx) = dx.as_deref_mut() {
                                    dx[xi] += g * k[ki];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Transposed 2x2 stride-2 convolution. `x` is the coarse side
/// `[B, c_in, H/2, W/2]`, `k` is `[c_in, c_out, 2, 2]`, `out` is
/// `[B, c_out, H, W]`. Each input cell scatters into its own 2x2 block.
pub(crate) fn deconv_forward<T: Scalar>(d: ConvDims, x: &[T], k: &[T], bias: &[T], out: &mut [T]) {
    let (ih, iw) = d.coarse();
    let (h, w) = (d.height, d.width);
    for b in 0..d.batch {
        let xb = &x[b * d.c_in * ih * iw..(b + 1) * d.c_in * ih * iw];
        let ob = &mut out[b * d.c_out * h * w..(b + 1) * d.c_out * h * w];
        for o in 0..d.c_out {
            ob[o * h * w..(o + 1) * h * w].fill(bias[o]);
        }
        for i in 0..ih {
            for j in 0..iw {
                for o in 0..d.c_out {
                    for a in 0..2 {
                        for e in 0..2 {
                            let mut acc = T::zero();
                            for c in 0..d.c_in {
                                acc += xb[c * ih * iw + i * iw + j] * k[((c * d.c_out + o) * 2 + a) * 2 + e];
                            }
                            ob[o * h * w + (2 * i + a) * w + 2 * j + e] += acc;
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn deconv_backward<T: Scalar>(
    d: ConvDims,
    x: &[T],
    k: &[T],
    dout: &[T],
    mut dx: Option<&mut [T]>,
    mut dk: Option<&mut [T]>,
    mut dbias: Option<&mut [T]>,
) {
    let (ih, iw) = d.coarse();
    let (h, w) = (d.height, d.width);
    for b in 0..d.batch {
        let xoff = b * d.c_in * ih * iw;
        let ooff = b * d.c_out * h * w;
        if let Some(db) = dbias.as_deref_mut() {
            for o in 0..d.c_out {
                for p in 0..h * w {
                    db[o] += dout[ooff + o * h * w + p];
                }
            }
        }
        for c in 0..d.c_in {
            for i in 0..ih {
                for j in 0..iw {
                    let xi = xoff + c * ih * iw + i * iw + j;
                    let mut acc = T::zero();
                    for o in 0..d.c_out {
                        for a in 0..2 {
                            for e in 0..2 {
                                let g = dout[ooff + o * h * w + (2 * i + a) * w + 2 * j + e];
                                let ki = ((c * d.c_out + o) * 2 + a) * 2 + e;
                                acc += g * k[ki];
                                if let Some(dk) = dk.as_deref_mut() {
                                    dk[ki] += g * x[xi];
                                }
                            }
                        }
                    }
                    if let Some(dx) = dx.as_deref_mut() {
                        dx[xi] += acc;
                    }
                }
            }
        }
    }
}

/// `c[m,n] += a[m,k] * b[k,n]`
pub(crate) fn gemm_nn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let ci = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let bp = &b[p * n..(p + 1) * n];
            for (cv, bv) in ci.iter_mut().zip(bp) {
                *cv += aip * *bv;
            }
        }
    }
}

/// `c[m,n] += a[m,k] * b[n,k]^T`
pub(crate) fn gemm_nt<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let ai = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let bj = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (av, bv) in ai.iter().zip(bj) {
                acc += *av * *bv;
            }
            c[i * n + j] += acc;
        }
    }
}

/// `c[k,n] += a[m,k]^T * b[m,n]`
pub(crate) fn gemm_tn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let bi = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let cp = &mut c[p * n..(p + 1) * n];
            for (cv, bv) in cp.iter_mut().zip(bi) {
                *cv += aip * *bv;
            }
        }
    }
}

/// Row-wise softmax with max subtraction. NaN inputs propagate.
pub(crate) fn softmax_rows_into<T: Scalar>(cols: usize, x: &[T], out: &mut [T]) {
    for (xr, or) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let max = xr
            .iter()
            .fold(T::neg_infinity(), |m, &v| if v > m || v.is_nan() { v } else { m });
        let mut total = T::zero();
        for (o, &v) in or.iter_mut().zip(xr) {
            *o = (v - max).exp();
            total += *o;
        }
        for o in or.iter_mut() {
            *o /= total;
        }
    }
}

/// `dx = y * (dy - <dy, y>)` per row.
pub(crate) fn softmax_rows_backward<T: Scalar>(cols: usize, y: &[T], dy: &[T], dx: &mut [T]) {
    for ((yr, gr), dr) in y
        .chunks_exact(cols)
        .zip(dy.chunks_exact(cols))
        .zip(dx.chunks_exact_mut(cols))
    {
        let inner = yr.iter().zip(gr).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
        for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
            *d += yv * (gv - inner);
        }
    }
}

fn conv_dims_from(input: &[usize], c_out: usize, fine: bool) -> Result<ConvDims> {
    let (batch, rest) = match input.len() {
        3 => (1, input),
        4 => (input[0], &input[1..]),
        _ => return Err(Error::contract(format!("expected [C,H,W] or [B,C,H,W], got {input:?}"))),
    };
    let (height, width) = if fine {
        (rest[1], rest[2])
    } else {
        (rest[1] * 2, rest[2] * 2)
    };
    ensure!(
        height % 2 == 0 && width % 2 == 0 && height > 0 && width > 0,
        "spatial dims {height}x{width} must be even and nonzero"
    );
    Ok(ConvDims {
        batch,
        c_in: rest[0],
        c_out,
        height,
        width,
    })
}

/// Output shape for a conv-like op, preserving whether the input was batched.
fn conv_out_shape(input: &[usize], c_out: usize, h: usize, w: usize) -> Vec<usize> {
    if input.len() == 4 {
        vec![input[0], c_out, h, w]
    } else {
        vec![c_out, h, w]
    }
}

pub(crate) fn check_conv(input: &[usize], kernel: &[usize], bias: &[usize]) -> Result<(ConvDims, Vec<usize>)> {
    ensure!(
        kernel.len() == 4 && kernel[2] == 2 && kernel[3] == 2,
        "conv kernel must be [C_out, C_in, 2, 2], got {kernel:?}"
    );
    let d = conv_dims_from(input, kernel[0], true)?;
    ensure!(
        kernel[1] == d.c_in,
        "conv kernel expects {} input channels, input has {}",
        kernel[1],
        d.c_in
    );
    ensure!(bias == [d.c_out], "conv bias must be [{}], got {bias:?}", d.c_out);
    let shape = conv_out_shape(input, d.c_out, d.height / 2, d.width / 2);
    Ok((d, shape))
}

pub(crate) fn check_deconv(input: &[usize], kernel: &[usize], bias: &[usize]) -> Result<(ConvDims, Vec<usize>)> {
    ensure!(
        kernel.len() == 4 && kernel[2] == 2 && kernel[3] == 2,
        "deconv kernel must be [C_in, C_out, 2, 2], got {kernel:?}"
    );
    let d = conv_dims_from(input, kernel[1], false)?;
    ensure!(
        kernel[0] == d.c_in,
        "deconv kernel expects {} input channels, input has {}",
        kernel[0],
        d.c_in
    );
    ensure!(bias == [d.c_out], "deconv bias must be [{}], got {bias:?}", d.c_out);
    let shape = conv_out_shape(input, d.c_out, d.height, d.width);
    Ok((d, shape))
}

/// 2x2 stride-2 convolution without padding on `[C,H,W]` or `[B,C,H,W]`.
pub fn conv2x2_s2<T: Scalar>(input: &Tensor<T>, kernel: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (d, shape) = check_conv(input.shape(), kernel.shape(), bias.shape())?;
    let mut out = Tensor::zeros(&shape);
    conv_forward(d, input.data(), kernel.data(), bias.data(), out.data_mut());
    Ok(out)
}

/// Transposed 2x2 stride-2 convolution; output spatial size doubles.
pub fn deconv2x2_s2<T: Scalar>(input: &Tensor<T>, kernel: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (d, shape) = check_deconv(input.shape(), kernel.shape(), bias.shape())?;
    let mut out = Tensor::zeros(&shape);
    deconv_forward(d, input.data(), kernel.data(), bias.data(), out.data_mut());
    Ok(out)
}

/// Softmax over a vector. Non-finite input is reported as an error.
pub fn softmax<T: Scalar>(v: &Tensor<T>) -> Result<Tensor<T>> {
    ensure!(v.rank() == 1 && v.numel() > 0, "softmax expects a nonempty vector");
    softmax_rows(v)
}

/// Softmax along the last axis.
pub fn softmax_rows<T: Scalar>(v: &Tensor<T>) -> Result<Tensor<T>> {
    ensure!(v.rank() >= 1, "softmax needs at least one axis");
    if v.data().iter().any(|x| x.is_nan()) {
        return Err(Error::non_finite("softmax input"));
    }
    let cols = *v.shape().last().unwrap();
    let mut out = Tensor::zeros(v.shape());
    softmax_rows_into(cols, v.data(), out.data_mut());
    Ok(out)
}
