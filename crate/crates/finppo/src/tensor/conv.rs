//! Valid 2-D cross-correlation and max pooling.
//!
//! The convolution accumulates each output element in a fixed order — kernel
//! row `m`, then kernel column `n`, then input channel `c`, all ascending,
//! with the bias added last — and the parallel path only splits work across
//! output planes, so results are bitwise identical with or without the
//! `parallel` feature.

use super::Tensor;
use crate::error::{Error, Result};
use crate::par;

/// Output extent of a valid convolution/pool along one axis.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize) -> usize {
    debug_assert!(input >= kernel && stride > 0);
    (input - kernel) / stride + 1
}

struct ConvDims {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    h_out: usize,
    w_out: usize,
}

fn conv_dims(
    op: &'static str,
    input: &Tensor,
    kernels: &Tensor,
    bias: &Tensor,
    stride: (usize, usize),
) -> Result<ConvDims> {
    if input.shape().len() != 3 || kernels.shape().len() != 4 {
        return Err(Error::ShapeMismatch {
            op,
            lhs: input.shape().to_vec(),
            rhs: kernels.shape().to_vec(),
        });
    }
    let (c_in, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (c_out, kc, kh, kw) = (
        kernels.shape()[0],
        kernels.shape()[1],
        kernels.shape()[2],
        kernels.shape()[3],
    );
    if kc != c_in {
        return Err(Error::ShapeMismatch {
            op,
            lhs: input.shape().to_vec(),
            rhs: kernels.shape().to_vec(),
        });
    }
    if bias.shape() != [c_out] {
        return Err(Error::ShapeMismatch {
            op,
            lhs: vec![c_out],
            rhs: bias.shape().to_vec(),
        });
    }
    let (sh, sw) = stride;
    if sh == 0 || sw == 0 {
        return Err(Error::InvalidArgument {
            op,
            reason: "stride must be positive".into(),
        });
    }
    if h < kh || w < kw {
        return Err(Error::InvalidArgument {
            op,
            reason: format!("input {h}x{w} smaller than kernel {kh}x{kw}"),
        });
    }
    Ok(ConvDims {
        c_in,
        h,
        w,
        c_out,
        kh,
        kw,
        sh,
        sw,
        h_out: conv_out_dim(h, kh, sh),
        w_out: conv_out_dim(w, kw, sw),
    })
}

/// One output channel of the cross-correlation; `out` is the [h_out × w_out]
/// plane for channel `k`.
fn conv_channel(out: &mut [f64], k: usize, input: &[f64], kernels: &[f64], bias: f64, d: &ConvDims) {
    let kplane = d.kh * d.kw;
    let kbase = k * d.c_in * kplane;
    for i in 0..d.h_out {
        for j in 0..d.w_out {
            let mut acc = 0.0;
            for m in 0..d.kh {
                for n in 0..d.kw {
                    for c in 0..d.c_in {
                        let wv = kernels[kbase + c * kplane + m * d.kw + n];
                        let xv = input[c * d.h * d.w + (i * d.sh + m) * d.w + (j * d.sw + n)];
                        acc += wv * xv;
                    }
                }
            }
            out[i * d.w_out + j] = acc + bias;
        }
    }
}

/// Valid cross-correlation: input [C_in, H, W], kernels [C_out, C_in, kh, kw],
/// bias [C_out] → output [C_out, H', W'] with H' = ⌊(H−kh)/sh⌋+1.
pub fn conv2d_forward(
    input: &Tensor,
    kernels: &Tensor,
    bias: &Tensor,
    stride: (usize, usize),
) -> Result<Tensor> {
    let d = conv_dims("conv2d_forward", input, kernels, bias, stride)?;
    let plane = d.h_out * d.w_out;
    let mut out = vec![0.0; d.c_out * plane];
    par::for_each_chunk_mut(&mut out, plane, |k, chunk| {
        conv_channel(chunk, k, input.data(), kernels.data(), bias.data()[k], &d);
    });
    Tensor::new(vec![d.c_out, d.h_out, d.w_out], out)
}

/// Sequential path of `conv2d_forward`; identical arithmetic, serial loop.
pub fn conv2d_forward_seq(
    input: &Tensor,
    kernels: &Tensor,
    bias: &Tensor,
    stride: (usize, usize),
) -> Result<Tensor> {
    let d = conv_dims("conv2d_forward", input, kernels, bias, stride)?;
    let plane = d.h_out * d.w_out;
    let mut out = vec![0.0; d.c_out * plane];
    for (k, chunk) in out.chunks_mut(plane).enumerate() {
        conv_channel(chunk, k, input.data(), kernels.data(), bias.data()[k], &d);
    }
    Tensor::new(vec![d.c_out, d.h_out, d.w_out], out)
}

/// Exact adjoint of `conv2d_forward`.
///
/// Returns (grad_input, grad_kernels, grad_bias). Kernel gradients sum over
/// output positions in ascending (i, j); input gradients over contributing
/// outputs in ascending (k, i, j, m, n).
pub fn conv2d_backward(
    grad_out: &Tensor,
    saved_input: &Tensor,
    kernels: &Tensor,
    stride: (usize, usize),
) -> Result<(Tensor, Tensor, Tensor)> {
    let c_out = kernels.shape()[0];
    let bias = Tensor::zeros(&[c_out]);
    let d = conv_dims("conv2d_backward", saved_input, kernels, &bias, stride)?;
    if grad_out.shape() != [d.c_out, d.h_out, d.w_out] {
        return Err(Error::ShapeMismatch {
            op: "conv2d_backward",
            lhs: grad_out.shape().to_vec(),
            rhs: vec![d.c_out, d.h_out, d.w_out],
        });
    }
    let gy = grad_out.data();
    let x = saved_input.data();
    let kern = kernels.data();
    let kplane = d.kh * d.kw;
    let out_plane = d.h_out * d.w_out;
    let in_plane = d.h * d.w;

    let mut grad_bias = vec![0.0; d.c_out];
    for k in 0..d.c_out {
        let mut s = 0.0;
        for v in &gy[k * out_plane..(k + 1) * out_plane] {
            s += v;
        }
        grad_bias[k] = s;
    }

    let mut grad_kernels = vec![0.0; d.c_out * d.c_in * kplane];
    par::for_each_chunk_mut(&mut grad_kernels, d.c_in * kplane, |k, gk| {
        for i in 0..d.h_out {
            for j in 0..d.w_out {
                let g = gy[k * out_plane + i * d.w_out + j];
                for c in 0..d.c_in {
                    for m in 0..d.kh {
                        for n in 0..d.kw {
                            gk[c * kplane + m * d.kw + n] +=
                                g * x[c * in_plane + (i * d.sh + m) * d.w + (j * d.sw + n)];
                        }
                    }
                }
            }
        }
    });

    let mut grad_input = vec![0.0; d.c_in * in_plane];
    par::for_each_chunk_mut(&mut grad_input, in_plane, |c, gi| {
        for k in 0..d.c_out {
            let kbase = k * d.c_in * kplane + c * kplane;
            for i in 0..d.h_out {
                for j in 0..d.w_out {
                    let g = gy[k * out_plane + i * d.w_out + j];
                    for m in 0..d.kh {
                        for n in 0..d.kw {
                            gi[(i * d.sh + m) * d.w + (j * d.sw + n)] += g * kern[kbase + m * d.kw + n];
                        }
                    }
                }
            }
        }
    });

    Ok((
        Tensor::new(vec![d.c_in, d.h, d.w], grad_input)?,
        Tensor::new(vec![d.c_out, d.c_in, d.kh, d.kw], grad_kernels)?,
        Tensor::new(vec![d.c_out], grad_bias)?,
    ))
}

/// Batched cross-correlation over [N, C_in, H, W] → [N, C_out, H', W'].
/// Sample × output-channel planes are independent, so they parallelize
/// without reordering any summation.
pub fn conv2d_forward_batch(
    input: &Tensor,
    kernels: &Tensor,
    bias: &Tensor,
    stride: (usize, usize),
) -> Result<Tensor> {
    if input.shape().len() != 4 {
        return Err(Error::ShapeMismatch {
            op: "conv2d_forward_batch",
            lhs: input.shape().to_vec(),
            rhs: vec![0, 0, 0, 0],
        });
    }
    let n = input.shape()[0];
    let sample = Tensor::zeros(&input.shape()[1..]);
    let d = conv_dims("conv2d_forward_batch", &sample, kernels, bias, stride)?;
    let in_len = d.c_in * d.h * d.w;
    let plane = d.h_out * d.w_out;
    let mut out = vec![0.0; n * d.c_out * plane];
    par::for_each_chunk_mut(&mut out, plane, |e, chunk| {
        let (s, k) = (e / d.c_out, e % d.c_out);
        conv_channel(
            chunk,
            k,
            &input.data()[s * in_len..(s + 1) * in_len],
            kernels.data(),
            bias.data()[k],
            &d,
        );
    });
    Tensor::new(vec![n, d.c_out, d.h_out, d.w_out], out)
}

/// Adjoint of the batched cross-correlation. Kernel and bias gradients sum
/// over samples in ascending order inside each output-channel task.
pub fn conv2d_backward_batch(
    grad_out: &Tensor,
    saved_input: &Tensor,
    kernels: &Tensor,
    stride: (usize, usize),
) -> Result<(Tensor, Tensor, Tensor)> {
    let n = saved_input.shape()[0];
    let sample = Tensor::zeros(&saved_input.shape()[1..]);
    let c_out = kernels.shape()[0];
    let bias = Tensor::zeros(&[c_out]);
    let d = conv_dims("conv2d_backward_batch", &sample, kernels, &bias, stride)?;
    if grad_out.shape() != [n, d.c_out, d.h_out, d.w_out] {
        return Err(Error::ShapeMismatch {
            op: "conv2d_backward_batch",
            lhs: grad_out.shape().to_vec(),
            rhs: vec![n, d.c_out, d.h_out, d.w_out],
        });
    }
    let gy = grad_out.data();
    let x = saved_input.data();
    let kern = kernels.data();
    let kplane = d.kh * d.kw;
    let out_plane = d.h_out * d.w_out;
    let in_plane = d.h * d.w;
    let in_len = d.c_in * in_plane;
    let out_len = d.c_out * out_plane;

    let mut grad_bias = vec![0.0; d.c_out];
    for (k, gb) in grad_bias.iter_mut().enumerate() {
        let mut s = 0.0;
        for smp in 0..n {
            for v in &gy[smp * out_len + k * out_plane..smp * out_len + (k + 1) * out_plane] {
                s += v;
            }
        }
        *gb = s;
    }

    let mut grad_kernels = vec![0.0; d.c_out * d.c_in * kplane];
    par::for_each_chunk_mut(&mut grad_kernels, d.c_in * kplane, |k, gk| {
        for smp in 0..n {
            let xs = &x[smp * in_len..(smp + 1) * in_len];
            for i in 0..d.h_out {
                for j in 0..d.w_out {
                    let g = gy[smp * out_len + k * out_plane + i * d.w_out + j];
                    for c in 0..d.c_in {
                        for m in 0..d.kh {
                            for nn in 0..d.kw {
                                gk[c * kplane + m * d.kw + nn] +=
                                    g * xs[c * in_plane + (i * d.sh + m) * d.w + (j * d.sw + nn)];
                            }
                        }
                    }
                }
            }
        }
    });

    let mut grad_input = vec![0.0; n * in_len];
    par::for_each_chunk_mut(&mut grad_input, in_plane, |e, gi| {
        let (smp, c) = (e / d.c_in, e % d.c_in);
        for k in 0..d.c_out {
            let kbase = k * d.c_in * kplane + c * kplane;
            for i in 0..d.h_out {
                for j in 0..d.w_out {
                    let g = gy[smp * out_len + k * out_plane + i * d.w_out + j];
                    for m in 0..d.kh {
                        for nn in 0..d.kw {
                            gi[(i * d.sh + m) * d.w + (j * d.sw + nn)] +=
                                g * kern[kbase + m * d.kw + nn];
                        }
                    }
                }
            }
        }
    });

    Ok((
        Tensor::new(saved_input.shape().to_vec(), grad_input)?,
        Tensor::new(vec![d.c_out, d.c_in, d.kh, d.kw], grad_kernels)?,
        Tensor::new(vec![d.c_out], grad_bias)?,
    ))
}

/// Saved context for the max-pool adjoint: the flat input index that won each
/// output window.
#[derive(Debug, Clone)]
pub struct MaxPoolCtx {
    in_shape: Vec<usize>,
    argmax: Vec<usize>,
}

/// Per-window maximum over [C, H, W] with floor semantics (trailing rows or
/// columns that do not fill a window are dropped). Ties go to the first
/// element in row-major window order.
pub fn maxpool2d_forward(
    input: &Tensor,
    kernel: (usize, usize),
    stride: (usize, usize),
) -> Result<(Tensor, MaxPoolCtx)> {
    if input.shape().len() != 3 {
        return Err(Error::ShapeMismatch {
            op: "maxpool2d",
            lhs: input.shape().to_vec(),
            rhs: vec![0, 0, 0],
        });
    }
    let (c_n, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (kh, kw) = kernel;
    let (sh, sw) = stride;
    if h < kh || w < kw {
        return Err(Error::InvalidArgument {
            op: "maxpool2d",
            reason: format!("input {h}x{w} smaller than window {kh}x{kw}"),
        });
    }
    let h_out = conv_out_dim(h, kh, sh);
    let w_out = conv_out_dim(w, kw, sw);
    let x = input.data();
    let mut out = vec![0.0; c_n * h_out * w_out];
    let mut argmax = vec![0usize; c_n * h_out * w_out];
    for c in 0..c_n {
        for i in 0..h_out {
            for j in 0..w_out {
                let mut best_idx = c * h * w + (i * sh) * w + j * sw;
                let mut best = x[best_idx];
                for m in 0..kh {
                    for n in 0..kw {
                        let idx = c * h * w + (i * sh + m) * w + (j * sw + n);
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                out[c * h_out * w_out + i * w_out + j] = best;
                argmax[c * h_out * w_out + i * w_out + j] = best_idx;
            }
        }
    }
    Ok((
        Tensor::new(vec![c_n, h_out, w_out], out)?,
        MaxPoolCtx {
            in_shape: input.shape().to_vec(),
            argmax,
        },
    ))
}

/// Routes each output gradient to the input element that produced the max.
pub fn maxpool2d_backward(grad_out: &Tensor, ctx: &MaxPoolCtx) -> Result<Tensor> {
    if grad_out.len() != ctx.argmax.len() {
        return Err(Error::ShapeMismatch {
            op: "maxpool2d_backward",
            lhs: grad_out.shape().to_vec(),
            rhs: vec![ctx.argmax.len()],
        });
    }
    let mut grad_in = Tensor::zeros(&ctx.in_shape);
    for (g, &idx) in grad_out.data().iter().zip(&ctx.argmax) {
        grad_in.data_mut()[idx] += g;
    }
    Ok(grad_in)
}
