//! Diagonal Gaussian policy head: sampling, exact log-density, entropy.

use super::{check_same_shape, Tensor};
use crate::error::Result;
use crate::rng::Rng;

const LN_2PI: f64 = 1.8378770664093453; // ln(2π)

/// Draw `mean + exp(log_std) ⊙ z` with `z` standard normal, one draw per
/// dimension in index order.
pub fn gaussian_sample(mean: &Tensor, log_std: &Tensor, rng: &mut Rng) -> Result<Tensor> {
    check_same_shape("gaussian_sample", mean, log_std)?;
    Ok(Tensor::new(
        mean.shape().to_vec(),
        mean.data()
            .iter()
            .zip(log_std.data())
            .map(|(&m, &ls)| m + ls.exp() * rng.normal())
            .collect(),
    )?)
}

/// Exact diagonal-Gaussian log density of `action`.
pub fn gaussian_log_prob(mean: &Tensor, log_std: &Tensor, action: &Tensor) -> Result<f64> {
    check_same_shape("gaussian_log_prob", mean, log_std)?;
    check_same_shape("gaussian_log_prob", mean, action)?;
    let mut lp = 0.0;
    for ((&m, &ls), &a) in mean.data().iter().zip(log_std.data()).zip(action.data()) {
        let z = (a - m) / ls.exp();
        lp += -0.5 * z * z - ls - 0.5 * LN_2PI;
    }
    Ok(lp)
}

/// Gradients of the log density with respect to mean and log_std.
/// d/dμ = z/σ, d/d log σ = z² − 1 with z = (a − μ)/σ.
pub fn gaussian_log_prob_grads(
    mean: &Tensor,
    log_std: &Tensor,
    action: &Tensor,
) -> Result<(Tensor, Tensor)> {
    check_same_shape("gaussian_log_prob_grads", mean, action)?;
    let d = mean.len();
    let mut d_mean = vec![0.0; d];
    let mut d_log_std = vec![0.0; d];
    for i in 0..d {
        let sigma = log_std.data()[i].exp();
        let z = (action.data()[i] - mean.data()[i]) / sigma;
        d_mean[i] = z / sigma;
        d_log_std[i] = z * z - 1.0;
    }
    Ok((
        Tensor::new(mean.shape().to_vec(), d_mean)?,
        Tensor::new(mean.shape().to_vec(), d_log_std)?,
    ))
}

/// Entropy of the diagonal Gaussian: Σ (log_std + ½ ln(2πe)).
pub fn gaussian_entropy(log_std: &Tensor) -> f64 {
    log_std
        .data()
        .iter()
        .map(|&ls| ls + 0.5 * (LN_2PI + 1.0))
        .sum()
}

/// Sample plus the log density of that sample and the distribution entropy.
pub fn gaussian_head(
    mean: &Tensor,
    log_std: &Tensor,
    rng: &mut Rng,
) -> Result<(Tensor, f64, f64)> {
    let sample = gaussian_sample(mean, log_std, rng)?;
    let log_prob = gaussian_log_prob(mean, log_std, &sample)?;
    Ok((sample, log_prob, gaussian_entropy(log_std)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_normal_log_density_at_zero() {
        let mean = Tensor::zeros(&[1]);
        let log_std = Tensor::zeros(&[1]);
        let action = Tensor::zeros(&[1]);
        let lp = gaussian_log_prob(&mean, &log_std, &action).unwrap();
        assert!((lp + 0.9189385332046727).abs() < 1e-12);
    }

    #[test]
    fn log_prob_peaks_at_mean() {
        let mean = Tensor::new(vec![2], vec![0.3, -0.7]).unwrap();
        let log_std = Tensor::new(vec![2], vec![0.1, -0.4]).unwrap();
        let at_mean = gaussian_log_prob(&mean, &log_std, &mean).unwrap();
        for delta in [0.01, 0.1, 1.0] {
            let off = Tensor::new(vec![2], vec![0.3 + delta, -0.7]).unwrap();
            assert!(gaussian_log_prob(&mean, &log_std, &off).unwrap() < at_mean);
        }
    }

    #[test]
    fn entropy_closed_form() {
        let log_std = Tensor::zeros(&[2]);
        assert!((gaussian_entropy(&log_std) - 2.8378770664093453).abs() < 1e-12);
    }

    #[test]
    fn sample_mean_converges() {
        let mut rng = Rng::new(55);
        let mean = Tensor::zeros(&[1]);
        let log_std = Tensor::zeros(&[1]);
        let n = 10_000;
        let mut sum = 0.0;
        for _ in 0..n {
            sum += gaussian_sample(&mean, &log_std, &mut rng).unwrap().data()[0];
        }
        assert!((sum / n as f64).abs() < 0.05);
    }

    #[test]
    fn head_log_prob_matches_density_of_sample() {
        let mut rng = Rng::new(17);
        let mean = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let log_std = Tensor::new(vec![3], vec![0.0, 0.3, -0.5]).unwrap();
        let (sample, lp, ent) = gaussian_head(&mean, &log_std, &mut rng).unwrap();
        let direct = gaussian_log_prob(&mean, &log_std, &sample).unwrap();
        assert_eq!(lp, direct);
        assert_eq!(ent, gaussian_entropy(&log_std));
    }
}
