//! Output likelihoods: Gaussian reconstruction and softmax-categorical.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Negative log-likelihood of a target given the network output, with
/// additive constants dropped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LossModel {
    /// `0.5 * ||target - output||^2 / sigma_d^2`
    GaussianMse { sigma_d: f64 },
    /// `-sum_i target_i * log softmax(output)_i`
    Bernoulli,
}

impl LossModel {
    pub fn gaussian(sigma_d: f64) -> Result<Self> {
        if !(sigma_d > 0.0 && sigma_d.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "sigma_d must be positive, got {sigma_d}"
            )));
        }
        Ok(Self::GaussianMse { sigma_d })
    }

    pub fn value(&self, output: &[f64], target: &[f64]) -> f64 {
        match *self {
            LossModel::GaussianMse { sigma_d } => {
                let s: f64 = output
                    .iter()
                    .zip(target)
                    .map(|(o, t)| (o - t) * (o - t))
                    .sum();
                0.5 * s / (sigma_d * sigma_d)
            }
            LossModel::Bernoulli => {
                let lse = log_sum_exp(output);
                output
                    .iter()
                    .zip(target)
                    .map(|(o, t)| -t * (o - lse))
                    .sum()
            }
        }
    }

    /// Gradient of [`LossModel::value`] with respect to the output.
    pub fn gradient(&self, output: &[f64], target: &[f64]) -> Vec<f64> {
        match *self {
            LossModel::GaussianMse { sigma_d } => {
                let inv = 1.0 / (sigma_d * sigma_d);
                output
                    .iter()
                    .zip(target)
                    .map(|(o, t)| (o - t) * inv)
                    .collect()
            }
            LossModel::Bernoulli => {
                let pi = softmax(output);
                let mass: f64 = target.iter().sum();
                pi.iter().zip(target).map(|(p, t)| p * mass - t).collect()
            }
        }
    }
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_gradient_matches_central_differences() {
        let loss = LossModel::gaussian(0.7).unwrap();
        let out = [0.3, -1.2, 2.0];
        let tgt = [0.1, 0.4, 1.5];
        let g = loss.gradient(&out, &tgt);
        for i in 0..3 {
            let mut p = out;
            let mut m = out;
            p[i] += 1e-6;
            m[i] -= 1e-6;
            let fd = (loss.value(&p, &tgt) - loss.value(&m, &tgt)) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-6 * (1.0 + g[i].abs()));
        }
    }

    #[test]
    fn bernoulli_gradient_is_softmax_minus_target() {
        let g = LossModel::Bernoulli.gradient(&[0.0, 0.0], &[1.0, 0.0]);
        assert!((g[0] + 0.5).abs() < 1e-15 && (g[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn sigma_must_be_positive() {
        assert!(LossModel::gaussian(0.0).is_err());
        assert!(LossModel::gaussian(-1.0).is_err());
    }
}
