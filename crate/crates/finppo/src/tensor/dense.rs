//! Affine (fully connected) layer and ReLU, single-sample and batched.

use super::{check_same_shape, Tensor};
use crate::error::{Error, Result};
use crate::par;

/// Inner product with a fixed 4-lane blocked accumulation: lane `l` sums the
/// elements at indices `4k + l` in ascending `k`, and the lanes combine as
/// `(l0 + l1) + (l2 + l3)` before the scalar tail is added. The order is part
/// of the crate's determinism contract; the blocking exists so the compiler
/// can vectorize the loop without reassociating anything itself.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let chunks = a.len() / 4;
    let mut acc = [0.0f64; 4];
    for i in 0..chunks {
        let pa = &a[4 * i..4 * i + 4];
        let pb = &b[4 * i..4 * i + 4];
        acc[0] += pa[0] * pb[0];
        acc[1] += pa[1] * pb[1];
        acc[2] += pa[2] * pb[2];
        acc[3] += pa[3] * pb[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for k in 4 * chunks..a.len() {
        s += a[k] * b[k];
    }
    s
}

/// `y += alpha * x`, elementwise.
#[inline]
pub(crate) fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x.iter()) {
        *yi += alpha * xi;
    }
}

fn check_dense(op: &'static str, in_dim: usize, weights: &Tensor, bias: &Tensor) -> Result<(usize, usize)> {
    if weights.shape().len() != 2 || weights.shape()[1] != in_dim {
        return Err(Error::ShapeMismatch {
            op,
            lhs: vec![in_dim],
            rhs: weights.shape().to_vec(),
        });
    }
    let out_dim = weights.shape()[0];
    if bias.shape() != [out_dim] {
        return Err(Error::ShapeMismatch {
            op,
            lhs: vec![out_dim],
            rhs: bias.shape().to_vec(),
        });
    }
    Ok((in_dim, out_dim))
}

/// y = W·x + b with x: [F], W: [O, F], b: [O].
pub fn dense_forward(x: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if x.shape().len() != 1 {
        return Err(Error::ShapeMismatch {
            op: "dense_forward",
            lhs: x.shape().to_vec(),
            rhs: vec![x.len()],
        });
    }
    let (f, o) = check_dense("dense_forward", x.len(), weights, bias)?;
    let mut y = vec![0.0; o];
    for (row, yo) in y.iter_mut().enumerate() {
        *yo = dot(&weights.data()[row * f..(row + 1) * f], x.data()) + bias.data()[row];
    }
    Tensor::new(vec![o], y)
}

/// Adjoint of `dense_forward`: returns (grad_x, grad_weights, grad_bias).
pub fn dense_backward(
    grad_out: &Tensor,
    x: &Tensor,
    weights: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let f = x.len();
    let o = weights.shape()[0];
    if grad_out.shape() != [o] {
        return Err(Error::ShapeMismatch {
            op: "dense_backward",
            lhs: grad_out.shape().to_vec(),
            rhs: vec![o],
        });
    }
    let mut gx = vec![0.0; f];
    let mut gw = vec![0.0; o * f];
    for row in 0..o {
        let g = grad_out.data()[row];
        axpy(&mut gx, g, &weights.data()[row * f..(row + 1) * f]);
        axpy(&mut gw[row * f..(row + 1) * f], g, x.data());
    }
    Ok((
        Tensor::new(vec![f], gx)?,
        Tensor::new(vec![o, f], gw)?,
        Tensor::new(vec![o], grad_out.data().to_vec())?,
    ))
}

/// Batched affine: x: [B, F] → y: [B, O]. Rows are independent, so the batch
/// dimension parallelizes without touching any summation order.
pub fn dense_forward_batch(x: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if x.shape().len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "dense_forward_batch",
            lhs: x.shape().to_vec(),
            rhs: vec![0, 0],
        });
    }
    let (b, f) = (x.shape()[0], x.shape()[1]);
    let (_, o) = check_dense("dense_forward_batch", f, weights, bias)?;
    let mut y = vec![0.0; b * o];
    let w = weights.data();
    let bias_d = bias.data();
    par::for_each_chunk_mut(&mut y, o, |n, row_out| {
        let xn = &x.data()[n * f..(n + 1) * f];
        for (row, yo) in row_out.iter_mut().enumerate() {
            *yo = dot(&w[row * f..(row + 1) * f], xn) + bias_d[row];
        }
    });
    Tensor::new(vec![b, o], y)
}

/// Adjoint of the batched affine. Weight gradients sum over the batch in
/// ascending sample order; the parallel split is across weight rows.
pub fn dense_backward_batch(
    grad_out: &Tensor,
    x: &Tensor,
    weights: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (b, f) = (x.shape()[0], x.shape()[1]);
    let o = weights.shape()[0];
    if grad_out.shape() != [b, o] {
        return Err(Error::ShapeMismatch {
            op: "dense_backward_batch",
            lhs: grad_out.shape().to_vec(),
            rhs: vec![b, o],
        });
    }
    let w = weights.data();
    let gy = grad_out.data();

    let mut gx = vec![0.0; b * f];
    par::for_each_chunk_mut(&mut gx, f, |n, gxn| {
        for row in 0..o {
            axpy(gxn, gy[n * o + row], &w[row * f..(row + 1) * f]);
        }
    });

    let mut gw = vec![0.0; o * f];
    par::for_each_chunk_mut(&mut gw, f, |row, gwr| {
        for n in 0..b {
            axpy(gwr, gy[n * o + row], &x.data()[n * f..(n + 1) * f]);
        }
    });

    let mut gb = vec![0.0; o];
    for (row, gbo) in gb.iter_mut().enumerate() {
        for n in 0..b {
            *gbo += gy[n * o + row];
        }
    }

    Ok((
        Tensor::new(vec![b, f], gx)?,
        Tensor::new(vec![o, f], gw)?,
        Tensor::new(vec![o], gb)?,
    ))
}

/// Elementwise max(0, x).
pub fn relu(x: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape().to_vec(),
        data: x.data().iter().map(|&v| v.max(0.0)).collect(),
        grad: None,
    }
}

/// ReLU adjoint; the subgradient at exactly zero is zero.
pub fn relu_backward(grad_out: &Tensor, saved_input: &Tensor) -> Result<Tensor> {
    check_same_shape("relu_backward", grad_out, saved_input)?;
    Ok(Tensor {
        shape: grad_out.shape().to_vec(),
        data: grad_out
            .data()
            .iter()
            .zip(saved_input.data())
            .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
            .collect(),
        grad: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_weights_pass_through() {
        let x = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let w = Tensor::new(
            vec![3, 3],
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        )
        .unwrap();
        let b = Tensor::zeros(&[3]);
        let y = dense_forward(&x, &w, &b).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn hand_computed_affine() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let w = Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap();
        let b = Tensor::new(vec![1], vec![0.5]).unwrap();
        let y = dense_forward(&x, &w, &b).unwrap();
        assert_eq!(y.data(), &[3.5]);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let w = Tensor::new(vec![1, 3], vec![1.0, 1.0, 1.0]).unwrap();
        let b = Tensor::zeros(&[1]);
        assert!(matches!(
            dense_forward(&x, &w, &b),
            Err(crate::error::Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn relu_values() {
        let x = Tensor::new(vec![3], vec![-1.0, 0.0, 2.5]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.5]);
    }

    #[test]
    fn relu_subgradient_zero_at_zero() {
        let x = Tensor::new(vec![3], vec![-1.0, 0.0, 2.5]).unwrap();
        let g = Tensor::new(vec![3], vec![1.0, 1.0, 1.0]).unwrap();
        assert_eq!(relu_backward(&g, &x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn batch_matches_single_sample_bitwise() {
        let mut rng = crate::rng::Rng::new(11);
        let (b, f, o) = (5, 17, 7);
        let x = Tensor::from_fn(&[b, f], |_| rng.normal());
        let w = Tensor::from_fn(&[o, f], |_| rng.normal());
        let bias = Tensor::from_fn(&[o], |_| rng.normal());
        let y = dense_forward_batch(&x, &w, &bias).unwrap();
        for n in 0..b {
            let xn = Tensor::new(vec![f], x.data()[n * f..(n + 1) * f].to_vec()).unwrap();
            let yn = dense_forward(&xn, &w, &bias).unwrap();
            assert_eq!(&y.data()[n * o..(n + 1) * o], yn.data());
        }
    }

    #[test]
    fn batch_backward_matches_sample_sums() {
        let mut rng = crate::rng::Rng::new(13);
        let (b, f, o) = (4, 9, 3);
        let x = Tensor::from_fn(&[b, f], |_| rng.normal());
        let w = Tensor::from_fn(&[o, f], |_| rng.normal());
        let gy = Tensor::from_fn(&[b, o], |_| rng.normal());
        let (gx, gw, gb) = dense_backward_batch(&gy, &x, &w).unwrap();

        let mut gw_ref = vec![0.0; o * f];
        let mut gb_ref = vec![0.0; o];
        for n in 0..b {
            let xn = Tensor::new(vec![f], x.data()[n * f..(n + 1) * f].to_vec()).unwrap();
            let gn = Tensor::new(vec![o], gy.data()[n * o..(n + 1) * o].to_vec()).unwrap();
            let (gxn, gwn, gbn) = dense_backward(&gn, &xn, &w).unwrap();
            assert_eq!(&gx.data()[n * f..(n + 1) * f], gxn.data());
            for (acc, v) in gw_ref.iter_mut().zip(gwn.data()) {
                *acc += v;
            }
            for (acc, v) in gb_ref.iter_mut().zip(gbn.data()) {
                *acc += v;
            }
        }
        for (a, r) in gw.data().iter().zip(&gw_ref) {
            assert!((a - r).abs() < 1e-12);
        }
        for (a, r) in gb.data().iter().zip(&gb_ref) {
            assert!((a - r).abs() < 1e-12);
        }
    }
}
