//! Diagonal Gaussian posterior over the network weights.
//!
//! `q(theta) = N(mean, diag(precision)^-1)`. Provides prior construction,
//! sampling, post-hoc Laplace fitting with a prior-precision grid search,
//! the Laplace mean shift, and Monte Carlo prediction with latent and
//! output uncertainty.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curvature::{ggn_backprop_with, CurvatureOptions, HessianMode};
use crate::error::{Error, Result};
use crate::loss::{log_sum_exp, LossModel};
use crate::net::{loss_value, Batch, LayerSpec, Network};
use crate::rng;

/// Examples per curvature pass in [`posthoc_fit`]; bounds the memory of the
/// per-chunk accumulators.
const FIT_BATCH: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum InitScheme {
    Zero,
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` per layer, biases included.
    FanInUniform { seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussianPosterior {
    pub mean: Vec<f64>,
    pub precision: Vec<f64>,
    /// Number of online updates applied.
    pub step: u64,
    /// Curvature mode of the last precision update, if any.
    pub mode: Option<HessianMode>,
}

impl DiagGaussianPosterior {
    pub fn new(mean: Vec<f64>, precision: Vec<f64>) -> Result<Self> {
        if mean.len() != precision.len() {
            return Err(Error::Shape(format!(
                "mean has {} entries but precision has {}",
                mean.len(),
                precision.len()
            )));
        }
        if let Some(j) = precision.iter().position(|h| !h.is_finite() || *h <= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "precision entry {j} is {} (must be positive and finite)",
                precision[j]
            )));
        }
        Ok(Self {
            mean,
            precision,
            step: 0,
            mode: None,
        })
    }

    /// Degenerate posterior with infinite precision: every sample equals
    /// `mean`. Used to evaluate a deterministic network through the same
    /// prediction path.
    pub fn point(mean: Vec<f64>) -> Self {
        let precision = vec![f64::INFINITY; mean.len()];
        Self {
            mean,
            precision,
            step: 0,
            mode: None,
        }
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    /// Sample `index` of the stream `seed`: `mean + precision^-1/2 * eps`.
    pub fn sample(&self, seed: u64, index: u64) -> Vec<f64> {
        let mut r = rng::stream(seed, index);
        let eps = rng::normals(&mut r, self.mean.len());
        self.mean
            .iter()
            .zip(&self.precision)
            .zip(eps)
            .map(|((m, h), e)| m + e / h.sqrt())
            .collect()
    }
}

/// Initial parameters under `scheme`.
pub fn init_params(net: &Network, scheme: InitScheme) -> Vec<f64> {
    let mut theta = vec![0.0; net.num_params()];
    if let InitScheme::FanInUniform { seed } = scheme {
        for slot in net.layout().slots() {
            let fan_in = match net.layers()[slot.layer] {
                LayerSpec::Linear { in_features, .. } => in_features,
                LayerSpec::Conv2d { in_ch, kh, kw, .. } => in_ch * kh * kw,
                _ => 1,
            };
            let bound = 1.0 / (fan_in as f64).sqrt();
            let mut r = rng::stream(seed, slot.layer as u64);
            for v in &mut theta[slot.offset..slot.offset + slot.len] {
                *v = r.random_range(-bound..bound);
            }
        }
    }
    theta
}

/// Prior `N(theta_0, gamma2^-1 I)`.
pub fn init_prior(net: &Network, prior_precision: f64, scheme: InitScheme) -> Result<DiagGaussianPosterior> {
    if !(prior_precision > 0.0 && prior_precision.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "prior precision must be positive, got {prior_precision}"
        )));
    }
    DiagGaussianPosterior::new(init_params(net, scheme), vec![prior_precision; net.num_params()])
}

/// `n` parameter samples, sample `s` drawn from stream `(seed, s)`.
pub fn sample_params(post: &DiagGaussianPosterior, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if n == 0 {
        return Err(Error::InvalidArgument("sample count must be at least 1".into()));
    }
    Ok((0..n as u64).into_par_iter().map(|s| post.sample(seed, s)).collect())
}

/// `theta* - H^-1 g` for the log density's gradient `g` and diagonal
/// Hessian `H`.
pub fn laplace_mean_shift(theta: &[f64], grad: &[f64], hessian_diag: &[f64]) -> Result<Vec<f64>> {
    if theta.len() != grad.len() || theta.len() != hessian_diag.len() {
        return Err(Error::Shape("mean shift inputs differ in length".into()));
    }
    theta
        .iter()
        .zip(grad)
        .zip(hessian_diag)
        .enumerate()
        .map(|(j, ((t, g), h))| {
            if *h == 0.0 {
                Err(Error::Singular(j))
            } else {
                Ok(t - g / h)
            }
        })
        .collect()
}

/// Summed GGN diagonal over a dataset, in fixed-size passes summed in order.
pub fn dataset_ggn_diagonal(
    net: &Network,
    params: &[f64],
    data: &[&[f64]],
    mode: HessianMode,
    loss: &LossModel,
    opts: &CurvatureOptions,
) -> Result<Vec<f64>> {
    let mut total = vec![0.0; net.num_params()];
    for chunk in data.chunks(FIT_BATCH) {
        let r = ggn_backprop_with(net, params, &Batch::autoencoding(chunk.to_vec()), mode, loss, opts)?;
        for (t, v) in total.iter_mut().zip(&r.diagonal) {
            *t += v;
        }
    }
    Ok(total)
}

/// Post-hoc Laplace approximation at `theta_map`: precision is the dataset
/// GGN diagonal plus `prior_precision`; the mean stays at `theta_map`.
pub fn posthoc_fit(
    net: &Network,
    theta_map: &[f64],
    data: &[&[f64]],
    mode: HessianMode,
    loss: &LossModel,
    prior_precision: f64,
) -> Result<DiagGaussianPosterior> {
    let ggn = dataset_ggn_diagonal(net, theta_map, data, mode, loss, &CurvatureOptions::default())?;
    posterior_from_ggn(theta_map, &ggn, prior_precision, mode)
}

pub fn posterior_from_ggn(
    theta_map: &[f64],
    ggn: &[f64],
    prior_precision: f64,
    mode: HessianMode,
) -> Result<DiagGaussianPosterior> {
    let mut post = DiagGaussianPosterior::new(
        theta_map.to_vec(),
        ggn.iter().map(|g| g + prior_precision).collect(),
    )?;
    post.mode = Some(mode);
    Ok(post)
}

/// Candidate prior precisions `10^k`, `k = -4, -3.75, ..., 4`.
pub fn prior_precision_grid() -> Vec<f64> {
    (0..=32).map(|i| 10f64.powf(-4.0 + 0.25 * i as f64)).collect()
}

/// Diagonal-Laplace log marginal likelihood with constants dropped.
pub fn log_marginal(theta_map: &[f64], ggn_diag: &[f64], dataset_nll: f64, gamma2: f64) -> f64 {
    let norm_sq: f64 = theta_map.iter().map(|t| t * t).sum();
    let log_det: f64 = ggn_diag
        .iter()
        .map(|g| 0.5 * gamma2.ln() - 0.5 * (g + gamma2).ln())
        .sum();
    -dataset_nll - 0.5 * gamma2 * norm_sq + log_det
}

/// Grid maximizer of [`log_marginal`]; ties go to the smallest value.
pub fn optimize_prior_precision(theta_map: &[f64], ggn_diag: &[f64], dataset_nll: f64) -> f64 {
    let mut best = (f64::NEG_INFINITY, 0.0);
    for g in prior_precision_grid() {
        let v = log_marginal(theta_map, ggn_diag, dataset_nll, g);
        if v > best.0 {
            best = (v, g);
        }
    }
    best.1
}

/// Summed NLL of the dataset at `params` (used by the marginal likelihood).
pub fn dataset_nll(net: &Network, params: &[f64], data: &[&[f64]], loss: &LossModel) -> Result<f64> {
    loss_value(net, params, &Batch::autoencoding(data.to_vec()), loss)
}

/// Monte Carlo summary for one input.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UncertaintySummary {
    pub output_mean: Vec<f64>,
    /// Population variance (divisor `n`).
    pub output_var: Vec<f64>,
    pub latent_mean: Vec<f64>,
    pub latent_var: Vec<f64>,
    /// `-log mean_s exp(-0.5 ||x - f_s(x)||^2 / sigma_d^2)`.
    pub nll: f64,
    /// `mean_s 0.5 ||x - f_s(x)||^2 / sigma_d^2`.
    pub nll_mean: f64,
}

impl UncertaintySummary {
    pub fn sigma_latent(&self) -> f64 {
        mean(&self.latent_var)
    }

    pub fn sigma_output(&self) -> f64 {
        mean(&self.output_var)
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Streaming mean and population variance.
#[derive(Debug, Clone)]
pub(crate) struct Welford {
    n: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    pub fn new(dim: usize) -> Self {
        Self {
            n: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    pub fn push(&mut self, x: &[f64]) {
        self.n += 1;
        let n = self.n as f64;
        for ((m, s), v) in self.mean.iter_mut().zip(&mut self.m2).zip(x) {
            let d = v - *m;
            *m += d / n;
            *s += d * (v - *m);
        }
    }

    pub fn finish(self) -> (Vec<f64>, Vec<f64>) {
        let n = self.n.max(1) as f64;
        let var = self.m2.into_iter().map(|s| (s / n).max(0.0)).collect();
        (self.mean, var)
    }
}

fn sigma_of(loss: &LossModel) -> f64 {
    match *loss {
        LossModel::GaussianMse { sigma_d } => sigma_d,
        LossModel::Bernoulli => 1.0,
    }
}

/// Monte Carlo prediction for a single input.
pub fn posterior_predict(
    net: &Network,
    post: &DiagGaussianPosterior,
    x: &[f64],
    n_samples: usize,
    seed: u64,
    loss: &LossModel,
) -> Result<UncertaintySummary> {
    Ok(posterior_predict_batch(net, post, &[x], n_samples, seed, loss)?.remove(0))
}

/// Monte Carlo prediction for many inputs. Each sampled network is drawn
/// once and shared by all inputs, so results for an input do not depend on
/// which other inputs are in the batch.
pub fn posterior_predict_batch(
    net: &Network,
    post: &DiagGaussianPosterior,
    xs: &[&[f64]],
    n_samples: usize,
    seed: u64,
    loss: &LossModel,
) -> Result<Vec<UncertaintySummary>> {
    if n_samples == 0 {
        return Err(Error::InvalidArgument("sample count must be at least 1".into()));
    }
    net.check_params(&post.mean)?;
    let sigma = sigma_of(loss);
    let inv = 0.5 / (sigma * sigma);
    struct Acc {
        out: Welford,
        lat: Welford,
        logs: Vec<f64>,
    }
    let mut accs: Vec<Acc> = xs
        .iter()
        .map(|_| Acc {
            out: Welford::new(net.output_dim()),
            lat: Welford::new(net.latent_dim()),
            logs: Vec::with_capacity(n_samples),
        })
        .collect();
    for s in 0..n_samples {
        let theta = post.sample(seed, s as u64);
        accs.par_iter_mut().zip(xs.par_iter()).try_for_each(|(acc, x)| -> Result<()> {
            let trace = net.forward(&theta, x)?;
            let out = trace.output();
            let sq: f64 = out.iter().zip(x.iter()).map(|(o, t)| (o - t) * (o - t)).sum();
            acc.logs.push(-inv * sq);
            acc.out.push(out);
            acc.lat.push(&trace.xs[net.latent_index() + 1]);
            Ok(())
        })?;
    }
    Ok(accs
        .into_iter()
        .map(|a| {
            let (output_mean, output_var) = a.out.finish();
            let (latent_mean, latent_var) = a.lat.finish();
            let n = a.logs.len() as f64;
            let nll = -(log_sum_exp(&a.logs) - n.ln());
            let nll_mean = -a.logs.iter().sum::<f64>() / n;
            UncertaintySummary {
                output_mean,
                output_var,
                latent_mean,
                latent_var,
                nll,
                nll_mean,
            }
        })
        .collect())
}
