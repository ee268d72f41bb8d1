//! Downstream evaluations of a weight posterior: OOD scores and AUROC,
//! missing-pixel imputation, semi-supervised kNN, calibration metrics,
//! latent variance maps, and a softmax-regression classifier.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::loss::{softmax, LossModel};
use crate::net::{ArchSpec, Batch, LayerSpec, Network};
use crate::posterior::{posterior_predict_batch, DiagGaussianPosterior, InitScheme, Welford};
use crate::rng;
use crate::trainer::{adam_step, AdamState};

const IMPUTE_NET_TAG: u64 = 21;
const IMPUTE_REFINE_TAG: u64 = 22;
const IMPUTE_NOISE_TAG: u64 = 23;
const SEMISUP_TAG: u64 = 24;

// ---------------------------------------------------------------- OOD

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OodScores {
    pub nll: Vec<f64>,
    pub typicality: Vec<f64>,
    pub sigma_latent: Vec<f64>,
    pub sigma_output: Vec<f64>,
}

impl OodScores {
    pub fn len(&self) -> usize {
        self.nll.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nll.is_empty()
    }

    /// `(name, scores)` for each statistic, in a fixed order.
    pub fn named(&self) -> [(&'static str, &[f64]); 4] {
        [
            ("nll", &self.nll),
            ("typicality", &self.typicality),
            ("sigma_latent", &self.sigma_latent),
            ("sigma_output", &self.sigma_output),
        ]
    }
}

/// Per-example OOD statistics under `n_samples` posterior samples.
pub fn ood_scores(
    net: &Network,
    post: &DiagGaussianPosterior,
    data: &[&[f64]],
    n_samples: usize,
    seed: u64,
    train_nll_mean: f64,
    loss: &LossModel,
) -> Result<OodScores> {
    let u = posterior_predict_batch(net, post, data, n_samples, seed, loss)?;
    Ok(OodScores {
        typicality: u.iter().map(|s| (s.nll - train_nll_mean).abs()).collect(),
        nll: u.iter().map(|s| s.nll).collect(),
        sigma_latent: u.iter().map(|s| s.sigma_latent()).collect(),
        sigma_output: u.iter().map(|s| s.sigma_output()).collect(),
    })
}

/// Area under the ROC curve for "higher score means out of distribution":
/// the probability that a random OOD score exceeds a random in-distribution
/// score, ties counting one half.
pub fn auroc(scores_in: &[f64], scores_out: &[f64]) -> Result<f64> {
    if scores_in.is_empty() || scores_out.is_empty() {
        return Err(Error::InvalidArgument("AUROC needs non-empty score lists".into()));
    }
    if scores_in.iter().chain(scores_out).any(|v| v.is_nan()) {
        return Err(Error::NonFinite("NaN score passed to AUROC".into()));
    }
    let mut all: Vec<(f64, bool)> = scores_in
        .iter()
        .map(|&v| (v, false))
        .chain(scores_out.iter().map(|&v| (v, true)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum_out = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their average
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum_out += avg * all[i..=j].iter().filter(|e| e.1).count() as f64;
        i = j + 1;
    }
    let (n_in, n_out) = (scores_in.len() as f64, scores_out.len() as f64);
    Ok((rank_sum_out - n_out * (n_out + 1.0) / 2.0) / (n_in * n_out))
}

/// ROC points `(false positive rate, true positive rate)` sweeping the
/// threshold from high to low.
pub fn roc_curve(scores_in: &[f64], scores_out: &[f64]) -> Vec<(f64, f64)> {
    let mut all: Vec<(f64, bool)> = scores_in
        .iter()
        .map(|&v| (v, false))
        .chain(scores_out.iter().map(|&v| (v, true)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (n_in, n_out) = (scores_in.len().max(1) as f64, scores_out.len().max(1) as f64);
    let mut pts = vec![(0.0, 0.0)];
    let (mut fp, mut tp) = (0.0, 0.0);
    let mut i = 0;
    while i < all.len() {
        let v = all[i].0;
        while i < all.len() && all[i].0 == v {
            if all[i].1 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        pts.push((fp / n_in, tp / n_out));
    }
    pts
}

// ---------------------------------------------------------- imputation

#[derive(Debug, Clone, PartialEq)]
pub enum MaskSpec {
    /// Top half of the image (first half of the rows) is missing.
    Half,
    /// Every pixel is missing.
    Full,
    /// Explicit flat indices of the missing pixels.
    Explicit(Vec<usize>),
}

impl MaskSpec {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "half" => Ok(MaskSpec::Half),
            "full" => Ok(MaskSpec::Full),
            other => Err(Error::InvalidArgument(format!("unknown mask `{other}` (expected half|full)"))),
        }
    }

    /// Boolean missing-pixel mask for an image of `shape`.
    pub fn missing(&self, shape: &[usize]) -> Result<Vec<bool>> {
        let d: usize = shape.iter().product();
        let mut m = vec![false; d];
        match self {
            MaskSpec::Full => m.fill(true),
            MaskSpec::Half => match *shape {
                [c, h, w] => {
                    for ch in 0..c {
                        m[ch * h * w..(ch * h + h / 2) * w].fill(true);
                    }
                }
                _ => m[..d / 2].fill(true),
            },
            MaskSpec::Explicit(idx) => {
                for &i in idx {
                    if i >= d {
                        return Err(Error::InvalidArgument(format!(
                            "mask index {i} outside image of {d} pixels"
                        )));
                    }
                    m[i] = true;
                }
            }
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImputationConfig {
    pub mask: MaskSpec,
    pub chain_count: usize,
    pub refine_count: usize,
    /// Clamped encode-decode iterations per stage.
    pub iterations: usize,
    /// Missing pixels start as `U(noise_low, noise_high)`.
    pub noise_low: f64,
    pub noise_high: f64,
}

impl Default for ImputationConfig {
    fn default() -> Self {
        Self {
            mask: MaskSpec::Half,
            chain_count: 5,
            refine_count: 5,
            iterations: 20,
            noise_low: 0.0,
            noise_high: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Imputation {
    /// Completed images, one per chain; observed pixels equal the input.
    pub chains: Vec<Vec<f64>>,
    /// Network reconstructions behind each chain, before clamping.
    pub raw: Vec<Vec<f64>>,
    /// Per-pixel population variance of `raw` across chains.
    pub variance: Vec<f64>,
    pub missing: Vec<bool>,
}

fn clamp_observed(x: &mut [f64], input: &[f64], missing: &[bool]) {
    for ((v, i), m) in x.iter_mut().zip(input).zip(missing) {
        if !m {
            *v = *i;
        }
    }
}

/// Run `iterations` clamped encode-decode passes from `x`; returns the last
/// unclamped reconstruction.
fn clamped_iterations(
    net: &Network,
    theta: &[f64],
    x: &mut [f64],
    input: &[f64],
    missing: &[bool],
    iterations: usize,
) -> Result<Vec<f64>> {
    let mut raw = x.to_vec();
    for _ in 0..iterations {
        raw = net.predict(theta, x)?;
        x.copy_from_slice(&raw);
        clamp_observed(x, input, missing);
    }
    Ok(raw)
}

/// Impute the masked pixels of `x`. Each chain starts from uniform noise in
/// the missing pixels and iterates clamped encode-decode passes under its
/// own sampled network; a second stage averages `refine_count` further runs
/// from the chain's result under freshly sampled networks.
pub fn impute(
    net: &Network,
    post: &DiagGaussianPosterior,
    x: &[f64],
    cfg: &ImputationConfig,
    seed: u64,
) -> Result<Imputation> {
    if cfg.chain_count == 0 || cfg.refine_count == 0 {
        return Err(Error::InvalidArgument("chain and refine counts must be at least 1".into()));
    }
    if x.len() != net.input_dim() {
        return Err(Error::Shape(format!(
            "image of length {} does not match input dimension {}",
            x.len(),
            net.input_dim()
        )));
    }
    let missing = cfg.mask.missing(net.input_shape())?;
    let net_seed = rng::derive(seed, IMPUTE_NET_TAG);
    let refine_seed = rng::derive(seed, IMPUTE_REFINE_TAG);
    let noise_seed = rng::derive(seed, IMPUTE_NOISE_TAG);
    let results: Vec<(Vec<f64>, Vec<f64>)> = (0..cfg.chain_count)
        .into_par_iter()
        .map(|c| {
            let mut r = rng::stream(noise_seed, c as u64);
            let mut cur = x.to_vec();
            for (v, m) in cur.iter_mut().zip(&missing) {
                if *m {
                    *v = r.random_range(cfg.noise_low..=cfg.noise_high);
                }
            }
            let theta = post.sample(net_seed, c as u64);
            clamped_iterations(net, &theta, &mut cur, x, &missing, cfg.iterations)?;
            let mut avg = Welford::new(x.len());
            let mut avg_raw = Welford::new(x.len());
            for k in 0..cfg.refine_count {
                let theta = post.sample(refine_seed, (c * cfg.refine_count + k) as u64);
                let mut y = cur.clone();
                let raw = clamped_iterations(net, &theta, &mut y, x, &missing, cfg.iterations)?;
                avg.push(&y);
                avg_raw.push(&raw);
            }
            let mut out = avg.finish().0;
            clamp_observed(&mut out, x, &missing);
            Ok((out, avg_raw.finish().0))
        })
        .collect::<Result<_>>()?;
    let (chains, raw): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let mut w = Welford::new(x.len());
    for r in &raw {
        w.push(r);
    }
    Ok(Imputation {
        chains,
        raw,
        variance: w.finish().1,
        missing,
    })
}

// ---------------------------------------------------------------- kNN

pub const KNN_CANDIDATES: [usize; 8] = [1, 3, 5, 7, 9, 11, 13, 15];

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Euclidean kNN prediction. Votes are tallied over the `k` nearest points
/// (distance ties broken by index); a tied vote goes to the tied class whose
/// nearest member is closest.
pub fn knn_predict(train: &[Vec<f64>], labels: &[u8], query: &[f64], k: usize) -> u8 {
    let k = k.clamp(1, train.len());
    let mut d: Vec<(f64, usize)> = train.iter().enumerate().map(|(i, t)| (sq_dist(t, query), i)).collect();
    d.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut near = d[..k].to_vec();
    near.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut votes = [0usize; 256];
    for &(_, i) in &near {
        votes[labels[i] as usize] += 1;
    }
    let top = *votes.iter().max().unwrap();
    near.iter()
        .map(|&(_, i)| labels[i])
        .find(|&l| votes[l as usize] == top)
        .unwrap()
}

pub fn knn_accuracy(train: &[Vec<f64>], labels: &[u8], test: &[Vec<f64>], test_labels: &[u8], k: usize) -> f64 {
    let correct: usize = test
        .par_iter()
        .zip(test_labels.par_iter())
        .map(|(q, &l)| usize::from(knn_predict(train, labels, q, k) == l))
        .sum();
    correct as f64 / test.len().max(1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KnnReport {
    pub accuracy: f64,
    pub k: usize,
    /// Two-fold cross-validation accuracy of every candidate `k`.
    pub cv: Vec<(usize, f64)>,
}

/// Pick `k` by two-fold cross-validation on the labeled set, then classify
/// the test set. `groups[i]` names the original point embedding `i` came
/// from; embeddings of one point always share a fold.
pub fn knn_semisup_eval(
    labeled: &[Vec<f64>],
    labels: &[u8],
    groups: Option<&[usize]>,
    test: &[Vec<f64>],
    test_labels: &[u8],
) -> Result<KnnReport> {
    if labeled.is_empty() || labeled.len() != labels.len() || test.len() != test_labels.len() {
        return Err(Error::InvalidArgument("kNN inputs are empty or misaligned".into()));
    }
    let mut present = [false; 256];
    for &l in labels {
        present[l as usize] = true;
    }
    if let Some(&l) = test_labels.iter().find(|&&l| !present[l as usize]) {
        return Err(Error::InvalidArgument(format!("class {l} has no labeled example")));
    }
    let own: Vec<usize>;
    let groups = match groups {
        Some(g) => g,
        None => {
            own = (0..labeled.len()).collect();
            &own
        }
    };
    // stratified alternating fold assignment over groups in first-seen order
    let mut fold_of_group = std::collections::BTreeMap::new();
    let mut per_class_count = [0usize; 256];
    for (i, &g) in groups.iter().enumerate() {
        fold_of_group.entry(g).or_insert_with(|| {
            let c = &mut per_class_count[labels[i] as usize];
            let f = *c % 2;
            *c += 1;
            f
        });
    }
    let fold: Vec<usize> = groups.iter().map(|g| fold_of_group[g]).collect();
    let mut cv = Vec::new();
    for &k in &KNN_CANDIDATES {
        let mut correct = 0usize;
        let mut total = 0usize;
        for f in 0..2 {
            let (tr, te): (Vec<usize>, Vec<usize>) = (0..labeled.len()).partition(|&i| fold[i] != f);
            if tr.is_empty() || te.is_empty() {
                continue;
            }
            let tx: Vec<Vec<f64>> = tr.iter().map(|&i| labeled[i].clone()).collect();
            let tl: Vec<u8> = tr.iter().map(|&i| labels[i]).collect();
            correct += te
                .par_iter()
                .map(|&i| usize::from(knn_predict(&tx, &tl, &labeled[i], k) == labels[i]))
                .sum::<usize>();
            total += te.len();
        }
        cv.push((k, if total == 0 { 0.0 } else { correct as f64 / total as f64 }));
    }
    let mut best = cv[0];
    for &c in &cv[1..] {
        if c.1 > best.1 {
            best = c;
        }
    }
    Ok(KnnReport {
        accuracy: knn_accuracy(labeled, labels, test, test_labels, best.0),
        k: best.0,
        cv,
    })
}

/// Latent codes under fixed parameters.
pub fn embed(net: &Network, theta: &[f64], xs: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
    xs.par_iter().map(|x| net.encode(theta, x)).collect()
}

/// `n_samples` latent codes per input; sample `s` of every input uses the
/// same sampled encoder.
pub fn embed_samples(
    net: &Network,
    post: &DiagGaussianPosterior,
    xs: &[&[f64]],
    n_samples: usize,
    seed: u64,
) -> Result<Vec<Vec<Vec<f64>>>> {
    let mut out = vec![Vec::with_capacity(n_samples); xs.len()];
    for s in 0..n_samples {
        let theta = post.sample(seed, s as u64);
        let z = embed(net, &theta, xs)?;
        for (o, z) in out.iter_mut().zip(z) {
            o.push(z);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SemisupRepeat {
    pub seed: u64,
    pub deterministic: KnnReport,
    pub stochastic: Option<KnnReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SemisupReport {
    pub labels_per_class: usize,
    pub embeddings_per_point: usize,
    pub repeats: Vec<SemisupRepeat>,
    pub deterministic_mean: f64,
    pub stochastic_mean: Option<f64>,
}

/// Repeated few-label kNN experiment. Each repeat draws
/// `labels_per_class` labeled points per class; the rest form the test set.
/// The deterministic run embeds everything once with `det_theta`; the
/// stochastic run embeds each labeled point `n_embed` times under posterior
/// samples and the test points once at the posterior mean.
#[allow(clippy::too_many_arguments)]
pub fn semisup_experiment(
    net: &Network,
    det_theta: &[f64],
    post: Option<&DiagGaussianPosterior>,
    images: &[&[f64]],
    labels: &[u8],
    labels_per_class: usize,
    repeats: usize,
    n_embed: usize,
    seed: u64,
) -> Result<SemisupReport> {
    if labels_per_class == 0 || repeats == 0 {
        return Err(Error::InvalidArgument("labels per class and repeats must be at least 1".into()));
    }
    let mut classes: Vec<u8> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let det_all = embed(net, det_theta, images)?;
    let mean_all = match post {
        Some(p) => Some(embed(net, &p.mean, images)?),
        None => None,
    };
    let mut out = Vec::new();
    for r in 0..repeats {
        let mut g = rng::stream(rng::derive(seed, SEMISUP_TAG), r as u64);
        let mut chosen = Vec::new();
        for &c in &classes {
            let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
            if idx.len() <= labels_per_class {
                return Err(Error::InvalidArgument(format!(
                    "class {c} has {} images, need more than {labels_per_class}",
                    idx.len()
                )));
            }
            idx.shuffle(&mut g);
            chosen.extend_from_slice(&idx[..labels_per_class]);
        }
        chosen.sort_unstable();
        let mut is_chosen = vec![false; labels.len()];
        chosen.iter().for_each(|&i| is_chosen[i] = true);
        let rest: Vec<usize> = (0..labels.len()).filter(|&i| !is_chosen[i]).collect();
        let test_labels: Vec<u8> = rest.iter().map(|&i| labels[i]).collect();
        let lab_labels: Vec<u8> = chosen.iter().map(|&i| labels[i]).collect();
        let pick = |all: &Vec<Vec<f64>>, idx: &[usize]| -> Vec<Vec<f64>> { idx.iter().map(|&i| all[i].clone()).collect() };
        let deterministic = knn_semisup_eval(&pick(&det_all, &chosen), &lab_labels, None, &pick(&det_all, &rest), &test_labels)?;
        let stochastic = match (post, &mean_all) {
            (Some(p), Some(mean_all)) => {
                let xs: Vec<&[f64]> = chosen.iter().map(|&i| images[i]).collect();
                let zs = embed_samples(net, p, &xs, n_embed, rng::derive(seed, r as u64))?;
                let mut emb = Vec::new();
                let mut lab = Vec::new();
                let mut grp = Vec::new();
                for (j, z) in zs.into_iter().enumerate() {
                    for e in z {
                        emb.push(e);
                        lab.push(lab_labels[j]);
                        grp.push(j);
                    }
                }
                Some(knn_semisup_eval(&emb, &lab, Some(&grp), &pick(mean_all, &rest), &test_labels)?)
            }
            _ => None,
        };
        out.push(SemisupRepeat {
            seed: r as u64,
            deterministic,
            stochastic,
        });
    }
    let n = out.len() as f64;
    let deterministic_mean = out.iter().map(|r| r.deterministic.accuracy).sum::<f64>() / n;
    let stochastic_mean = post.map(|_| out.iter().map(|r| r.stochastic.as_ref().unwrap().accuracy).sum::<f64>() / n);
    Ok(SemisupReport {
        labels_per_class,
        embeddings_per_point: n_embed,
        repeats: out,
        deterministic_mean,
        stochastic_mean,
    })
}

// --------------------------------------------------------- calibration

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub confidence: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationReport {
    pub ece: f64,
    pub mce: f64,
    pub rmsce: f64,
    pub n_bins: usize,
    /// Occupied bins only.
    pub bins: Vec<CalibrationBin>,
}

/// Binned calibration errors over equal-width max-probability bins.
pub fn calibration(probs: &[Vec<f64>], labels: &[usize], n_bins: usize) -> Result<CalibrationReport> {
    if probs.len() != labels.len() || probs.is_empty() || n_bins == 0 {
        return Err(Error::InvalidArgument("calibration needs aligned, non-empty inputs".into()));
    }
    let mut count = vec![0usize; n_bins];
    let mut conf = vec![0.0; n_bins];
    let mut acc = vec![0.0; n_bins];
    for (i, (p, &y)) in probs.iter().zip(labels).enumerate() {
        let s: f64 = p.iter().sum();
        if (s - 1.0).abs() > 1e-6 || p.iter().any(|v| !(0.0..=1.0 + 1e-12).contains(v)) {
            return Err(Error::InvalidArgument(format!("row {i} is not a probability vector (sum {s})")));
        }
        if y >= p.len() {
            return Err(Error::InvalidArgument(format!("label {y} out of range in row {i}")));
        }
        let mut best = 0;
        for (j, v) in p.iter().enumerate() {
            if *v > p[best] {
                best = j;
            }
        }
        let c = p[best];
        let b = ((c * n_bins as f64) as usize).min(n_bins - 1);
        count[b] += 1;
        conf[b] += c;
        acc[b] += f64::from(u8::from(best == y));
    }
    let n = probs.len() as f64;
    let (mut ece, mut mce, mut ms) = (0.0f64, 0.0f64, 0.0f64);
    let mut bins = Vec::new();
    for b in 0..n_bins {
        if count[b] == 0 {
            continue;
        }
        let nb = count[b] as f64;
        let (cb, ab) = (conf[b] / nb, acc[b] / nb);
        let gap = (ab - cb).abs();
        ece += nb / n * gap;
        ms += nb / n * gap * gap;
        mce = mce.max(gap);
        bins.push(CalibrationBin {
            lower: b as f64 / n_bins as f64,
            upper: (b + 1) as f64 / n_bins as f64,
            count: count[b],
            confidence: cb,
            accuracy: ab,
        });
    }
    Ok(CalibrationReport {
        ece,
        mce,
        rmsce: ms.sqrt(),
        n_bins,
        bins,
    })
}

// --------------------------------------------------- latent variance map

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatentMap {
    pub grid_size: usize,
    pub range: f64,
    /// Grid coordinates along each latent axis.
    pub axis: Vec<f64>,
    /// `values[i * grid_size + j]` is the mean output variance at
    /// `z = (axis[i], axis[j])`.
    pub values: Vec<f64>,
}

impl LatentMap {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("z1,z2,variance\n");
        for (i, a) in self.axis.iter().enumerate() {
            for (j, b) in self.axis.iter().enumerate() {
                s.push_str(&format!("{a},{b},{}\n", self.values[i * self.grid_size + j]));
            }
        }
        s
    }

    /// 8-bit binary PGM: columns follow `z1`, rows follow `z2` from top
    /// (largest) to bottom, min-max normalized.
    pub fn to_pgm(&self) -> Vec<u8> {
        let n = self.grid_size;
        let lo = self.values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut out = format!("P5\n{n} {n}\n255\n").into_bytes();
        for row in 0..n {
            let j = n - 1 - row;
            for i in 0..n {
                let v = self.values[i * n + j];
                let g = if hi > lo { ((v - lo) / (hi - lo) * 255.0).round() } else { 0.0 };
                out.push(g as u8);
            }
        }
        out
    }
}

/// Mean-over-pixels decoder variance on a `grid_size x grid_size` grid over
/// `[-range, range]^2`. Decoder sample `s` is shared by all grid points.
pub fn latent_variance_map(
    net: &Network,
    post: &DiagGaussianPosterior,
    range: f64,
    grid_size: usize,
    n_samples: usize,
    seed: u64,
) -> Result<LatentMap> {
    if net.latent_dim() != 2 {
        return Err(Error::InvalidArgument(format!(
            "latent map needs a 2-D latent space, network has {}",
            net.latent_dim()
        )));
    }
    if grid_size == 0 || n_samples == 0 {
        return Err(Error::InvalidArgument("grid size and sample count must be at least 1".into()));
    }
    let axis: Vec<f64> = if grid_size == 1 {
        vec![0.0]
    } else {
        (0..grid_size)
            .map(|i| -range + 2.0 * range * i as f64 / (grid_size - 1) as f64)
            .collect()
    };
    let points: Vec<[f64; 2]> = axis.iter().flat_map(|&a| axis.iter().map(move |&b| [a, b])).collect();
    let mut acc: Vec<Welford> = points.iter().map(|_| Welford::new(net.output_dim())).collect();
    for s in 0..n_samples {
        let theta = post.sample(seed, s as u64);
        acc.par_iter_mut().zip(points.par_iter()).try_for_each(|(w, z)| -> Result<()> {
            w.push(&net.decode(&theta, z)?);
            Ok(())
        })?;
    }
    let values = acc
        .into_iter()
        .map(|w| {
            let v = w.finish().1;
            v.iter().sum::<f64>() / v.len() as f64
        })
        .collect();
    Ok(LatentMap {
        grid_size,
        range,
        axis,
        values,
    })
}

// ---------------------------------------------------- simple classifier

/// Multinomial logistic regression on flattened pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxClassifier {
    pub net: Network,
    pub params: Vec<f64>,
    pub n_classes: usize,
}

impl SoftmaxClassifier {
    pub fn new(n_features: usize, n_classes: usize) -> Result<Self> {
        let net = Network::new(ArchSpec {
            input_shape: vec![n_features],
            layers: vec![LayerSpec::linear(n_features, n_classes)],
            latent_index: 0,
        })?;
        let params = crate::posterior::init_params(&net, InitScheme::Zero);
        Ok(Self { net, params, n_classes })
    }

    pub fn classify(&self, image: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(&self.net.predict(&self.params, image)?))
    }

    pub fn one_hot(&self, label: usize) -> Vec<f64> {
        let mut t = vec![0.0; self.n_classes];
        t[label] = 1.0;
        t
    }

    /// Summed cross-entropy and its gradient.
    pub fn loss_and_grad(&self, images: &[&[f64]], labels: &[usize]) -> Result<(f64, Vec<f64>)> {
        let targets: Vec<Vec<f64>> = labels.iter().map(|&l| self.one_hot(l)).collect();
        let batch = Batch::supervised(images.to_vec(), targets.iter().map(|t| t.as_slice()).collect())?;
        crate::net::loss_and_grad(&self.net, &self.params, &batch, &LossModel::Bernoulli)
    }
}

/// Train softmax regression with Adam over shuffled minibatches.
pub fn train_simple_classifier(
    images: &[&[f64]],
    labels: &[usize],
    n_classes: usize,
    epochs: usize,
    seed: u64,
) -> Result<SoftmaxClassifier> {
    if images.is_empty() || images.len() != labels.len() {
        return Err(Error::InvalidArgument("classifier needs aligned, non-empty data".into()));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::InvalidArgument(format!("label {l} out of range for {n_classes} classes")));
    }
    let mut model = SoftmaxClassifier::new(images[0].len(), n_classes)?;
    let mut adam = AdamState::new(model.params.len());
    let mut order: Vec<usize> = (0..images.len()).collect();
    for e in 0..epochs {
        order.shuffle(&mut rng::stream(seed, e as u64));
        for idx in order.chunks(64) {
            let xs: Vec<&[f64]> = idx.iter().map(|&i| images[i]).collect();
            let ys: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let (_, g) = model.loss_and_grad(&xs, &ys)?;
            let mut p = std::mem::take(&mut model.params);
            adam_step(&mut adam, &mut p, &g, 0.01, 0.9, 0.999, 1e-8)?;
            model.params = p;
        }
    }
    Ok(model)
}
