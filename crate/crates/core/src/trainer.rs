//! MAP training of a plain autoencoder and the online Laplacian-autoencoder
//! loop.
//!
//! One online step draws parameter samples from the current posterior,
//! averages their log-likelihood gradients, moves the posterior mean with
//! Adam, then refreshes the precision with the batch GGN diagonal under a
//! `(1 - alpha)` discount.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::curvature::{ggn_backprop, HessianMode};
use crate::error::{Error, Result};
use crate::loss::LossModel;
use crate::net::{loss_and_grad, loss_value, Batch, Network};
use crate::posterior::{init_params, init_prior, DiagGaussianPosterior, InitScheme};
use crate::rng;

const SHUFFLE_TAG: u64 = 1;
const SAMPLE_TAG: u64 = 2;
const INIT_TAG: u64 = 3;

/// Where the GGN refresh of an online step is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GgnAt {
    /// At the mean before the Adam step.
    Pre,
    /// At the mean after the Adam step.
    Post,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    Zero,
    FanIn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchKind {
    Mlp,
    Conv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub alpha: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Monte Carlo samples used at evaluation time.
    pub mc_samples: usize,
    pub mc_samples_per_step: usize,
    pub prior_precision: f64,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub scheduler_factor: f64,
    pub scheduler_patience: usize,
    pub early_stop_patience: usize,
    pub hessian_mode: HessianMode,
    pub sigma_d: f64,
    pub ggn_at: GgnAt,
    pub init: InitKind,
    pub arch: ArchKind,
    pub latent_dim: usize,
    /// Hidden widths of the MLP encoder (mirrored in the decoder).
    pub hidden: Vec<usize>,
    /// Channel counts of the conv encoder stages (mirrored in the decoder).
    pub channels: Vec<usize>,
    pub val_size: usize,
    /// Use at most this many training images; 0 means all.
    pub max_train: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            alpha: 0.0001,
            batch_size: 64,
            max_epochs: 100,
            mc_samples: 100,
            mc_samples_per_step: 1,
            prior_precision: 1.0,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            scheduler_factor: 0.5,
            scheduler_patience: 5,
            early_stop_patience: 8,
            hessian_mode: HessianMode::ApproxDiagonal,
            sigma_d: 1.0,
            ggn_at: GgnAt::Post,
            init: InitKind::FanIn,
            arch: ArchKind::Mlp,
            latent_dim: 2,
            hidden: vec![128, 32],
            channels: vec![8, 16],
            val_size: 5000,
            max_train: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: &str| {
            Err(Error::Config {
                key: key.into(),
                reason: reason.into(),
            })
        };
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be positive");
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad("alpha", "must lie in (0, 1]");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        if self.mc_samples == 0 {
            return bad("mc_samples", "must be at least 1");
        }
        if self.mc_samples_per_step == 0 {
            return bad("mc_samples_per_step", "must be at least 1");
        }
        if !(self.prior_precision > 0.0 && self.prior_precision.is_finite()) {
            return bad("prior_precision", "must be positive");
        }
        if !(self.sigma_d > 0.0 && self.sigma_d.is_finite()) {
            return bad("sigma_d", "must be positive");
        }
        if !(self.scheduler_factor > 0.0 && self.scheduler_factor <= 1.0) {
            return bad("scheduler_factor", "must lie in (0, 1]");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam_beta1", "Adam betas must lie in [0, 1)");
        }
        if self.latent_dim == 0 {
            return bad("latent_dim", "must be at least 1");
        }
        Ok(())
    }

    pub fn loss(&self) -> LossModel {
        LossModel::GaussianMse {
            sigma_d: self.sigma_d,
        }
    }

    pub fn init_scheme(&self) -> InitScheme {
        match self.init {
            InitKind::Zero => InitScheme::Zero,
            InitKind::FanIn => InitScheme::FanInUniform {
                seed: rng::derive(self.seed, INIT_TAG),
            },
        }
    }
}

/// Adam moments with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One Adam update of `params` in place.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut [f64],
    grad: &[f64],
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    if state.m.len() != grad.len() || params.len() != grad.len() {
        return Err(Error::Shape(format!(
            "Adam state of length {} cannot update {} parameters with {} gradients",
            state.m.len(),
            params.len(),
            grad.len()
        )));
    }
    state.t += 1;
    let c1 = 1.0 - beta1.powi(state.t as i32);
    let c2 = 1.0 - beta2.powi(state.t as i32);
    for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut state.m).zip(&mut state.v) {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let mh = *m / c1;
        let vh = *v / c2;
        *p -= lr * mh / (vh.sqrt() + eps);
    }
    Ok(())
}

/// Multiplies the learning rate by `factor` once `patience` consecutive
/// epochs fail to improve on the best validation loss.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauScheduler {
    pub lr: f64,
    factor: f64,
    patience: usize,
    best: f64,
    bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize) -> Self {
        Self {
            lr,
            factor,
            patience,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    /// Record an epoch's validation loss; returns true if the rate dropped.
    pub fn observe(&mut self, val: f64) -> bool {
        if val < self.best {
            self.best = val;
            self.bad_epochs = 0;
            return false;
        }
        self.bad_epochs += 1;
        if self.patience == 0 || self.bad_epochs >= self.patience {
            self.lr *= self.factor;
            self.bad_epochs = 0;
            return true;
        }
        false
    }
}

/// Counts epochs since the best validation loss.
#[derive(Debug, Clone, PartialEq)]
struct EarlyStop {
    patience: usize,
    best: f64,
    since: usize,
}

impl EarlyStop {
    fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            since: 0,
        }
    }

    fn should_stop(&mut self, val: f64) -> bool {
        if val < self.best {
            self.best = val;
            self.since = 0;
        } else {
            self.since += 1;
        }
        self.patience > 0 && self.since >= self.patience
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-example training loss over the epoch's minibatches.
    pub train_loss: f64,
    /// Mean per-example validation loss of the (mean) parameters.
    pub val_loss: f64,
    /// Learning rate used during the epoch.
    pub lr: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub steps: u64,
}

impl TrainReport {
    /// `epoch,train_loss,val_loss,lr` rows with a header. Wall time is left
    /// out so the file is reproducible.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,lr\n");
        for e in &self.epochs {
            s.push_str(&format!("{},{},{},{}\n", e.epoch, e.train_loss, e.val_loss, e.lr));
        }
        s
    }

    pub fn wall_seconds(&self) -> f64 {
        self.epochs.iter().map(|e| e.wall_seconds).sum()
    }
}

fn check_finite(what: &str, v: &[f64]) -> Result<()> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(j) => Err(Error::NonFinite(format!("{what}: entry {j} is {}", v[j]))),
        None => Ok(()),
    }
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut r = rng::stream(rng::derive(seed, SHUFFLE_TAG), epoch as u64);
    order.shuffle(&mut r);
    order
}

fn mean_loss(net: &Network, params: &[f64], data: &[&[f64]], loss: &LossModel) -> Result<f64> {
    if data.is_empty() {
        return Ok(f64::NAN);
    }
    let v = loss_value(net, params, &Batch::autoencoding(data.to_vec()), loss)?;
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("validation loss is {v}")));
    }
    Ok(v / data.len() as f64)
}

fn check_data(net: &Network, train: &[&[f64]]) -> Result<()> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    if let Some(x) = train.iter().find(|x| x.len() != net.input_dim()) {
        return Err(Error::Shape(format!(
            "training example of length {} does not match input dimension {}",
            x.len(),
            net.input_dim()
        )));
    }
    Ok(())
}

/// Shared epoch loop: `step` processes one minibatch and returns its summed
/// loss; `current` yields the parameters to validate.
fn run_epochs(
    net: &Network,
    train: &[&[f64]],
    val: &[&[f64]],
    cfg: &TrainConfig,
    mut step: impl FnMut(&[&[f64]], f64) -> Result<f64>,
    current: &dyn Fn() -> Vec<f64>,
) -> Result<TrainReport> {
    cfg.validate()?;
    check_data(net, train)?;
    let loss = cfg.loss();
    let mut sched = PlateauScheduler::new(cfg.lr, cfg.scheduler_factor, cfg.scheduler_patience);
    let mut stop = EarlyStop::new(cfg.early_stop_patience);
    let mut report = TrainReport::default();
    for epoch in 0..cfg.max_epochs {
        let start = Instant::now();
        let lr = sched.lr;
        let order = epoch_order(train.len(), cfg.seed, epoch);
        let mut total = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&[f64]> = idx.iter().map(|&i| train[i]).collect();
            total += step(&batch, lr)?;
            report.steps += 1;
        }
        let train_loss = total / train.len() as f64;
        let val_loss = if val.is_empty() {
            train_loss
        } else {
            mean_loss(net, &current(), val, &loss)?
        };
        report.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr,
            wall_seconds: start.elapsed().as_secs_f64(),
        });
        sched.observe(val_loss);
        if stop.should_stop(val_loss) {
            break;
        }
    }
    Ok(report)
}

/// Standard autoencoder training by Adam on the summed Gaussian
/// reconstruction loss, starting from `cfg.init`.
pub fn train_map(net: &Network, train: &[&[f64]], val: &[&[f64]], cfg: &TrainConfig) -> Result<(Vec<f64>, TrainReport)> {
    let theta = std::cell::RefCell::new(init_params(net, cfg.init_scheme()));
    let mut adam = AdamState::new(net.num_params());
    let loss = cfg.loss();
    let report = run_epochs(
        net,
        train,
        val,
        cfg,
        |batch, lr| {
            let mut th = theta.borrow_mut();
            let (l, g) = loss_and_grad(net, &th, &Batch::autoencoding(batch.to_vec()), &loss)?;
            if !l.is_finite() {
                return Err(Error::NonFinite(format!("training loss is {l}")));
            }
            check_finite("gradient", &g)?;
            adam_step(&mut adam, &mut th, &g, lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)?;
            Ok(l)
        },
        &|| theta.borrow().clone(),
    )?;
    Ok((theta.into_inner(), report))
}

/// One online LAE update on `batch`. Returns the batch loss averaged over
/// the parameter samples.
pub fn lae_online_step(
    net: &Network,
    post: &mut DiagGaussianPosterior,
    adam: &mut AdamState,
    batch: &[&[f64]],
    cfg: &TrainConfig,
    lr: f64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("online step on an empty batch".into()));
    }
    let loss = cfg.loss();
    let b = Batch::autoencoding(batch.to_vec());
    let s_count = cfg.mc_samples_per_step;
    let sample_seed = rng::derive(cfg.seed, SAMPLE_TAG);
    let mut grad = vec![0.0; post.len()];
    let mut total = 0.0;
    for s in 0..s_count {
        let theta = post.sample(sample_seed, post.step * s_count as u64 + s as u64);
        let (l, g) = loss_and_grad(net, &theta, &b, &loss)?;
        if !l.is_finite() {
            return Err(Error::NonFinite(format!("sampled training loss is {l} at step {}", post.step)));
        }
        total += l;
        for (a, v) in grad.iter_mut().zip(&g) {
            *a += v;
        }
    }
    let inv = 1.0 / s_count as f64;
    grad.iter_mut().for_each(|g| *g *= inv);
    check_finite("gradient", &grad)?;

    let pre_mean = match cfg.ggn_at {
        GgnAt::Pre => Some(post.mean.clone()),
        GgnAt::Post => None,
    };
    let mut mean = std::mem::take(&mut post.mean);
    let stepped = adam_step(adam, &mut mean, &grad, lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    post.mean = mean;
    stepped?;
    let at = pre_mean.as_deref().unwrap_or(&post.mean);
    let ggn = ggn_backprop(net, at, &b, cfg.hessian_mode, &loss)?;
    check_finite("curvature", &ggn.diagonal)?;
    for (h, g) in post.precision.iter_mut().zip(&ggn.diagonal) {
        *h = (1.0 - cfg.alpha) * *h + g;
    }
    post.step += 1;
    post.mode = Some(cfg.hessian_mode);
    Ok(total * inv)
}

/// Online LAE training from the prior `N(theta_0, gamma2^-1 I)`.
pub fn train_online(
    net: &Network,
    train: &[&[f64]],
    val: &[&[f64]],
    cfg: &TrainConfig,
) -> Result<(DiagGaussianPosterior, TrainReport)> {
    let post = std::cell::RefCell::new(init_prior(net, cfg.prior_precision, cfg.init_scheme())?);
    let mut adam = AdamState::new(net.num_params());
    let report = run_epochs(
        net,
        train,
        val,
        cfg,
        |batch, lr| lae_online_step(net, &mut post.borrow_mut(), &mut adam, batch, cfg, lr),
        &|| post.borrow().mean.clone(),
    )?;
    Ok((post.into_inner(), report))
}
