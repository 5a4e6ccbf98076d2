//! Normalization layers: per-column input standardization, batch
//! normalization, and (inverted) dropout.

use super::{check_same_shape, Mode, Tensor};
use crate::error::{Error, Result};
use crate::par;
use crate::rng::Rng;

/// Saved context for the column-normalize adjoint.
#[derive(Debug, Clone)]
pub struct ColumnNormCtx {
    sigma: Vec<f64>,
    eps: f64,
    output: Tensor,
}

/// Standardize each column of a [H, W] matrix to zero mean and unit variance:
/// `(x - mean) / (std + eps)` with the population standard deviation.
/// Constant columns come out as exactly zero thanks to `eps`.
pub fn column_normalize(x: &Tensor, eps: f64) -> Result<(Tensor, ColumnNormCtx)> {
    if x.shape().len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "column_normalize",
            lhs: x.shape().to_vec(),
            rhs: vec![0, 0],
        });
    }
    let (h, w) = (x.shape()[0], x.shape()[1]);
    let data = x.data();
    let mut sigma = vec![0.0; w];
    let mut out = vec![0.0; h * w];
    for col in 0..w {
        let mut sum = 0.0;
        for row in 0..h {
            sum += data[row * w + col];
        }
        let mean = sum / h as f64;
        let mut var = 0.0;
        for row in 0..h {
            let d = data[row * w + col] - mean;
            var += d * d;
        }
        let sd = (var / h as f64).sqrt();
        sigma[col] = sd;
        let inv = 1.0 / (sd + eps);
        for row in 0..h {
            out[row * w + col] = (data[row * w + col] - mean) * inv;
        }
    }
    let output = Tensor::new(vec![h, w], out)?;
    Ok((
        output.clone(),
        ColumnNormCtx {
            sigma,
            eps,
            output,
        },
    ))
}

/// Adjoint of `column_normalize`. For a constant column (sigma = 0) the
/// std-derivative term is dropped, matching the subgradient of the flat
/// output there.
pub fn column_normalize_backward(grad_out: &Tensor, ctx: &ColumnNormCtx) -> Result<Tensor> {
    check_same_shape("column_normalize_backward", grad_out, &ctx.output)?;
    let (h, w) = (grad_out.shape()[0], grad_out.shape()[1]);
    let g = grad_out.data();
    let y = ctx.output.data();
    let mut gx = vec![0.0; h * w];
    for col in 0..w {
        let s = ctx.sigma[col] + ctx.eps;
        let mut g_mean = 0.0;
        let mut gy_dot = 0.0;
        for row in 0..h {
            g_mean += g[row * w + col];
            gy_dot += g[row * w + col] * y[row * w + col];
        }
        g_mean /= h as f64;
        let sd_term = if ctx.sigma[col] > 0.0 {
            gy_dot / (h as f64 * ctx.sigma[col])
        } else {
            0.0
        };
        for row in 0..h {
            gx[row * w + col] = (g[row * w + col] - g_mean) / s - sd_term * y[row * w + col];
        }
    }
    Tensor::new(vec![h, w], gx)
}

/// Per-channel running statistics for batch normalization.
///
/// A freshly constructed value has seen no batches; evaluating with it is an
/// error. Callers that need eval-mode forward passes before the first update
/// (a policy collecting its first rollout) start from `with_identity`, which
/// pins mean 0 / variance 1 until training statistics arrive.
#[derive(Debug, Clone)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    initialized: bool,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![0.0; channels],
            initialized: false,
        }
    }

    pub fn with_identity(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            initialized: true,
        }
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

/// Saved context for the batch-norm adjoint (train mode only).
#[derive(Debug, Clone)]
pub struct BatchNormCtx {
    x_hat: Vec<f64>,
    inv_std: Vec<f64>,
    shape: Vec<usize>,
}

fn bn_dims(op: &'static str, x: &Tensor, channels: usize) -> Result<(usize, usize, usize)> {
    let s = x.shape();
    if s.len() != 4 || s[1] != channels {
        return Err(Error::ShapeMismatch {
            op,
            lhs: s.to_vec(),
            rhs: vec![0, channels, 0, 0],
        });
    }
    Ok((s[0], s[1], s[2] * s[3]))
}

/// Batch normalization over [N, C, H, W] with per-channel statistics taken
/// across batch and spatial dimensions.
///
/// Train mode normalizes with the batch's population mean/variance, scales by
/// `gamma`, shifts by `beta`, and folds the batch statistics into `stats`
/// with the given momentum (`r ← (1−momentum)·r + momentum·batch`). Eval mode
/// normalizes with the running statistics and returns no context.
pub fn batchnorm_forward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
    momentum: f64,
    mode: Mode,
    stats: &mut RunningStats,
) -> Result<(Tensor, Option<BatchNormCtx>)> {
    let channels = stats.channels();
    if gamma.shape() != [channels] || beta.shape() != [channels] {
        return Err(Error::ShapeMismatch {
            op: "batchnorm",
            lhs: gamma.shape().to_vec(),
            rhs: vec![channels],
        });
    }
    let (n, c, plane) = bn_dims("batchnorm", x, channels)?;
    let per_channel = n * plane;
    let data = x.data();
    let idx = |s: usize, ch: usize, p: usize| (s * c + ch) * plane + p;

    match mode {
        Mode::Train => {
            if per_channel < 2 {
                return Err(Error::InvalidArgument {
                    op: "batchnorm",
                    reason: format!(
                        "train mode needs at least 2 values per channel, got {per_channel}"
                    ),
                });
            }
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let mut sum = 0.0;
                for s in 0..n {
                    for p in 0..plane {
                        sum += data[idx(s, ch, p)];
                    }
                }
                let m = sum / per_channel as f64;
                let mut v = 0.0;
                for s in 0..n {
                    for p in 0..plane {
                        let d = data[idx(s, ch, p)] - m;
                        v += d * d;
                    }
                }
                mean[ch] = m;
                var[ch] = v / per_channel as f64;
            }
            let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
            let mut x_hat = vec![0.0; data.len()];
            par::for_each_chunk_mut(&mut x_hat, c * plane, |s, chunk| {
                for ch in 0..c {
                    let (m, is) = (mean[ch], inv_std[ch]);
                    for p in 0..plane {
                        chunk[ch * plane + p] = (data[idx(s, ch, p)] - m) * is;
                    }
                }
            });
            let mut out = vec![0.0; data.len()];
            par::for_each_chunk_mut(&mut out, c * plane, |s, chunk| {
                for ch in 0..c {
                    let (g, b) = (gamma.data()[ch], beta.data()[ch]);
                    for p in 0..plane {
                        chunk[ch * plane + p] = g * x_hat[(s * c + ch) * plane + p] + b;
                    }
                }
            });
            for ch in 0..c {
                stats.mean[ch] = (1.0 - momentum) * stats.mean[ch] + momentum * mean[ch];
                stats.var[ch] = (1.0 - momentum) * stats.var[ch] + momentum * var[ch];
            }
            stats.initialized = true;
            Ok((
                Tensor::new(x.shape().to_vec(), out)?,
                Some(BatchNormCtx {
                    x_hat,
                    inv_std,
                    shape: x.shape().to_vec(),
                }),
            ))
        }
        Mode::Eval => {
            if !stats.initialized {
                return Err(Error::InvalidArgument {
                    op: "batchnorm",
                    reason: "eval mode before any running-stat update".into(),
                });
            }
            let inv_std: Vec<f64> = stats.var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
            let mut out = vec![0.0; data.len()];
            par::for_each_chunk_mut(&mut out, c * plane, |s, chunk| {
                for ch in 0..c {
                    let (m, is) = (stats.mean[ch], inv_std[ch]);
                    let (g, b) = (gamma.data()[ch], beta.data()[ch]);
                    for p in 0..plane {
                        chunk[ch * plane + p] = g * (data[idx(s, ch, p)] - m) * is + b;
                    }
                }
            });
            Ok((Tensor::new(x.shape().to_vec(), out)?, None))
        }
    }
}

/// Adjoint of train-mode batch normalization.
/// Returns (grad_x, grad_gamma, grad_beta).
pub fn batchnorm_backward(
    grad_out: &Tensor,
    ctx: &BatchNormCtx,
    gamma: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    if grad_out.shape() != ctx.shape.as_slice() {
        return Err(Error::ShapeMismatch {
            op: "batchnorm_backward",
            lhs: grad_out.shape().to_vec(),
            rhs: ctx.shape.clone(),
        });
    }
    let (n, c, plane) = (ctx.shape[0], ctx.shape[1], ctx.shape[2] * ctx.shape[3]);
    let m_count = (n * plane) as f64;
    let gy = grad_out.data();
    let idx = |s: usize, ch: usize, p: usize| (s * c + ch) * plane + p;

    let mut grad_gamma = vec![0.0; c];
    let mut grad_beta = vec![0.0; c];
    for ch in 0..c {
        let mut sg = 0.0;
        let mut sgx = 0.0;
        for s in 0..n {
            for p in 0..plane {
                let i = idx(s, ch, p);
                sg += gy[i];
                sgx += gy[i] * ctx.x_hat[i];
            }
        }
        grad_beta[ch] = sg;
        grad_gamma[ch] = sgx;
    }

    let mut gx = vec![0.0; gy.len()];
    par::for_each_chunk_mut(&mut gx, c * plane, |s, chunk| {
        for ch in 0..c {
            let scale = gamma.data()[ch] * ctx.inv_std[ch] / m_count;
            for p in 0..plane {
                let i = idx(s, ch, p);
                chunk[ch * plane + p] = scale
                    * (m_count * gy[i] - grad_beta[ch] - ctx.x_hat[i] * grad_gamma[ch]);
            }
        }
    });

    Ok((
        Tensor::new(ctx.shape.clone(), gx)?,
        Tensor::new(vec![c], grad_gamma)?,
        Tensor::new(vec![c], grad_beta)?,
    ))
}

/// Inverted dropout. Train mode zeroes each element with probability `p` and
/// scales survivors by 1/(1−p); eval mode is the identity. The returned mask
/// holds the per-element factor (0 or 1/(1−p)) and drives the backward pass.
/// Train mode consumes exactly one uniform draw per element, independent of
/// `p`, so the RNG stream position depends only on how much data flowed.
pub fn dropout_forward(x: &Tensor, p: f64, mode: Mode, rng: &mut Rng) -> Result<(Tensor, Tensor)> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidArgument {
            op: "dropout",
            reason: format!("p must be in [0, 1), got {p}"),
        });
    }
    match mode {
        Mode::Eval => {
            let mask = Tensor::full(x.shape(), 1.0);
            Ok((x.clone(), mask))
        }
        Mode::Train => {
            let keep_scale = 1.0 / (1.0 - p);
            let mut mask = Tensor::zeros(x.shape());
            for m in mask.data_mut() {
                *m = if rng.next_f64() < p { 0.0 } else { keep_scale };
            }
            let y = dropout_apply_mask(x, &mask)?;
            Ok((y, mask))
        }
    }
}

/// Elementwise product with a dropout mask; used both as the backward pass
/// and as the fixed-mask forward in gradient checks.
pub fn dropout_apply_mask(x: &Tensor, mask: &Tensor) -> Result<Tensor> {
    check_same_shape("dropout_apply_mask", x, mask)?;
    Ok(Tensor::new(
        x.shape().to_vec(),
        x.data()
            .iter()
            .zip(mask.data())
            .map(|(&v, &m)| v * m)
            .collect(),
    )?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn column_normalize_hand_case() {
        let x = Tensor::new(vec![3, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let (y, _) = column_normalize(&x, 1e-8).unwrap();
        let expect = 1.224744871391589; // 1 / sqrt(2/3)
        assert!((y.data()[0] + expect).abs() < 1e-6);
        assert!(y.data()[1].abs() < 1e-12);
        assert!((y.data()[2] - expect).abs() < 1e-6);
    }

    #[test]
    fn column_normalize_constant_column_is_zero() {
        let x = Tensor::new(vec![3, 1], vec![5.0, 5.0, 5.0]).unwrap();
        let (y, _) = column_normalize(&x, 1e-8).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn column_normalize_moments() {
        let mut rng = crate::rng::Rng::new(8);
        let x = Tensor::from_fn(&[40, 7], |_| 3.0 + 10.0 * rng.normal());
        let (y, _) = column_normalize(&x, 1e-8).unwrap();
        for col in 0..7 {
            let mut mean = 0.0;
            for row in 0..40 {
                mean += y.at(&[row, col]);
            }
            mean /= 40.0;
            let mut var = 0.0;
            for row in 0..40 {
                let d = y.at(&[row, col]) - mean;
                var += d * d;
            }
            var /= 40.0;
            assert!(mean.abs() <= 1e-12, "col {col} mean {mean}");
            assert!((var - 1.0).abs() <= 1e-6, "col {col} var {var}");
        }
    }

    #[test]
    fn batchnorm_two_values() {
        let x = Tensor::new(vec![2, 1, 1, 1], vec![1.0, 3.0]).unwrap();
        let gamma = Tensor::full(&[1], 1.0);
        let beta = Tensor::zeros(&[1]);
        let mut stats = RunningStats::new(1);
        let (y, _) =
            batchnorm_forward(&x, &gamma, &beta, 0.0, 0.1, Mode::Train, &mut stats).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-12);
        assert!((y.data()[1] - 1.0).abs() < 1e-12);
        // momentum 0.1 folds the batch stats in
        assert!((stats.mean[0] - 0.2).abs() < 1e-12);
        assert!((stats.var[0] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn batchnorm_identity_on_standardized_input() {
        // zero-mean unit-population-variance pair stays put with eps = 0
        let x = Tensor::new(vec![2, 1, 1, 1], vec![-1.0, 1.0]).unwrap();
        let gamma = Tensor::full(&[1], 1.0);
        let beta = Tensor::zeros(&[1]);
        let mut stats = RunningStats::new(1);
        let (y, _) =
            batchnorm_forward(&x, &gamma, &beta, 0.0, 0.1, Mode::Train, &mut stats).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-12);
        assert!((y.data()[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn batchnorm_eval_before_update_errors() {
        let x = Tensor::zeros(&[1, 1, 2, 2]);
        let gamma = Tensor::full(&[1], 1.0);
        let beta = Tensor::zeros(&[1]);
        let mut stats = RunningStats::new(1);
        assert!(
            batchnorm_forward(&x, &gamma, &beta, 1e-5, 0.1, Mode::Eval, &mut stats).is_err()
        );
        let mut identity = RunningStats::with_identity(1);
        assert!(
            batchnorm_forward(&x, &gamma, &beta, 1e-5, 0.1, Mode::Eval, &mut identity).is_ok()
        );
    }

    #[test]
    fn dropout_p_zero_is_identity() {
        let mut rng = crate::rng::Rng::new(1);
        let x = Tensor::from_fn(&[4, 4], |i| i as f64);
        let (y, mask) = dropout_forward(&x, 0.0, Mode::Train, &mut rng).unwrap();
        assert_eq!(y.data(), x.data());
        assert!(mask.data().iter().all(|&m| m == 1.0));
    }

    #[test]
    fn dropout_eval_is_identity() {
        let mut rng = crate::rng::Rng::new(1);
        let x = Tensor::from_fn(&[4, 4], |i| i as f64);
        let (y, _) = dropout_forward(&x, 0.9, Mode::Eval, &mut rng).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn dropout_rejects_p_one() {
        let mut rng = crate::rng::Rng::new(1);
        let x = Tensor::zeros(&[2]);
        assert!(dropout_forward(&x, 1.0, Mode::Train, &mut rng).is_err());
    }

    #[test]
    fn dropout_preserves_expectation() {
        let mut rng = crate::rng::Rng::new(77);
        let x = Tensor::scalar(1.0);
        let n = 10_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let (y, _) = dropout_forward(&x, 0.5, Mode::Train, &mut rng).unwrap();
            sum += y.data()[0];
        }
        let mean = sum / n as f64;
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
    }
}
