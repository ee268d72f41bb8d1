//! Command-line entry point for training and evaluation.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use lae::arch;
use lae::bench::{bench_hessian, fit_slopes, records_to_csv, slopes_to_csv, timings_to_csv};
use lae::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use lae::config::{parse_config, DEFAULT_MIXED_THRESHOLD};
use lae::curvature::{CurvatureOptions, HessianMode};
use lae::dataio::{load_images, training_split, write_idx, IdxArray, ImageDataset};
use lae::posterior::{
    dataset_ggn_diagonal, dataset_nll, optimize_prior_precision, posterior_from_ggn, posterior_predict_batch,
    DiagGaussianPosterior,
};
use lae::tasks::{auroc, impute, latent_variance_map, ood_scores, semisup_experiment, ImputationConfig, MaskSpec};
use lae::trainer::{train_map, train_online, TrainConfig};
use lae::{Error, Network, Result};

#[derive(Parser, Debug)]
#[command(name = "lae", version, about = "Laplacian autoencoder tools")]
struct Cli {
    /// Worker threads for parallel sections.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Seed for every random choice; overrides the config seed when given.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a deterministic autoencoder (MAP estimate).
    TrainMap {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a Laplacian autoencoder with online posterior updates.
    TrainOnline {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a post-hoc diagonal Laplace posterior around a checkpoint's mean.
    FitLaplace {
        #[arg(long)]
        ckpt: PathBuf,
        /// block, exact, approx or mixed.
        #[arg(long)]
        mode: String,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Select the prior precision by marginal likelihood.
        #[arg(long)]
        optimize_prior: bool,
        /// Feature size up to which mixed mode keeps the full matrix.
        #[arg(long, default_value_t = DEFAULT_MIXED_THRESHOLD)]
        mixed_threshold: usize,
    },
    /// Out-of-distribution AUROC for each uncertainty score.
    EvalOod {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        in_images: PathBuf,
        #[arg(long)]
        ood_images: PathBuf,
        #[arg(long, default_value_t = 100)]
        samples: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Impute masked pixels with several posterior chains per image.
    Impute {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        images: PathBuf,
        /// half or full.
        #[arg(long, default_value = "half")]
        mask: String,
        /// Number of leading images to impute.
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Few-label kNN classification on latent embeddings.
    Semisup {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        labels_per_class: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        /// Posterior embeddings per labeled image.
        #[arg(long, default_value_t = 100)]
        embeddings: usize,
        /// Deterministic baseline checkpoint; defaults to the mean of `--ckpt`.
        #[arg(long)]
        det_ckpt: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decoder variance over a grid in a 2-D latent space.
    LatentMap {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        range: f64,
        #[arg(long)]
        grid: usize,
        #[arg(long, default_value_t = 100)]
        samples: usize,
        /// Output prefix; writes PREFIX.csv and PREFIX.pgm.
        #[arg(long)]
        out: PathBuf,
    },
    /// Time and memory of one curvature pass on the 5-conv benchmark net.
    BenchHessian {
        /// Comma-separated modes.
        #[arg(long, value_delimiter = ',', default_value = "approx,exact")]
        modes: Vec<String>,
        /// Comma-separated ascending image sides.
        #[arg(long, value_delimiter = ',', default_value = "8,16,32,64")]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        /// Memory guard in floats.
        #[arg(long, default_value_t = CurvatureOptions::default().guard_floats)]
        guard: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("lae: error: {}", e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.max(1))
        .build_global()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    let seed = cli.seed;
    match cli.command {
        Command::TrainMap {
            config,
            images,
            labels,
            out,
        } => cmd_train(&config, &images, labels.as_deref(), &out, seed, false),
        Command::TrainOnline { config, images, out } => cmd_train(&config, &images, None, &out, seed, true),
        Command::FitLaplace {
            ckpt,
            mode,
            images,
            out,
            optimize_prior,
            mixed_threshold,
        } => cmd_fit_laplace(&ckpt, &mode, mixed_threshold, &images, &out, optimize_prior, seed),
        Command::EvalOod {
            ckpt,
            in_images,
            ood_images,
            samples,
            out,
        } => cmd_eval_ood(&ckpt, &in_images, &ood_images, samples, &out, seed.unwrap_or(0)),
        Command::Impute {
            ckpt,
            images,
            mask,
            count,
            out,
        } => cmd_impute(&ckpt, &images, &mask, count, &out, seed.unwrap_or(0)),
        Command::Semisup {
            ckpt,
            images,
            labels,
            labels_per_class,
            repeats,
            embeddings,
            det_ckpt,
            out,
        } => cmd_semisup(
            &ckpt,
            det_ckpt.as_deref(),
            &images,
            &labels,
            labels_per_class,
            repeats,
            embeddings,
            &out,
            seed.unwrap_or(0),
        ),
        Command::LatentMap {
            ckpt,
            range,
            grid,
            samples,
            out,
        } => cmd_latent_map(&ckpt, range, grid, samples, &out, seed.unwrap_or(0)),
        Command::BenchHessian {
            modes,
            sizes,
            repeats,
            guard,
            out,
        } => cmd_bench(&modes, &sizes, repeats, guard, &out, seed.unwrap_or(0)),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Mean per-image Monte Carlo NLL on `data`.
fn mc_nll_mean(net: &Network, post: &DiagGaussianPosterior, data: &[&[f64]], samples: usize, seed: u64, cfg: &TrainConfig) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let u = posterior_predict_batch(net, post, data, samples, seed, &cfg.loss())?;
    Ok(u.iter().map(|s| s.nll).sum::<f64>() / u.len() as f64)
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<TrainConfig> {
    let mut cfg = parse_config(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn split(ds: &ImageDataset, cfg: &TrainConfig) -> (ImageDataset, ImageDataset) {
    training_split(ds, cfg.val_size, cfg.max_train, cfg.seed)
}

fn cmd_train(config: &Path, images: &Path, labels: Option<&Path>, out: &Path, seed: Option<u64>, online: bool) -> Result<()> {
    let cfg = load_config(config, seed)?;
    let ds = load_images(images, labels)?;
    let (train, val) = split(&ds, &cfg);
    if train.is_empty() {
        return Err(Error::InvalidArgument("no training images after the validation split".into()));
    }
    let spec = arch::from_config(&cfg, train.image_shape())?;
    let net = Network::autoencoder(spec.clone())?;
    let (tr, va) = (train.rows(), val.rows());
    let (mut ckpt, report) = if online {
        let (post, report) = train_online(&net, &tr, &va, &cfg)?;
        let nll = mc_nll_mean(&net, &post, &tr, cfg.mc_samples, cfg.seed, &cfg)?;
        let mut c = Checkpoint::from_posterior("online", spec, cfg.clone(), &post);
        c.header.train_nll_mean = Some(nll);
        (c, report)
    } else {
        let (theta, report) = train_map(&net, &tr, &va, &cfg)?;
        let nll = dataset_nll(&net, &theta, &tr, &cfg.loss())? / tr.len() as f64;
        let mut c = Checkpoint::new("map", spec, cfg.clone(), theta, None);
        c.header.train_nll_mean = Some(nll);
        (c, report)
    };
    ckpt.header.step = ckpt.header.step.max(report.steps);
    save_checkpoint(out, &ckpt)?;
    fs::write(with_suffix(out, ".train.csv"), report.to_csv())?;
    let last = report.epochs.last();
    println!(
        "trained {} epochs, final val loss {}",
        report.epochs.len(),
        last.map(|e| format!("{:.4}", e.val_loss)).unwrap_or_else(|| "n/a".into())
    );
    Ok(())
}

fn cmd_fit_laplace(
    ckpt_path: &Path,
    mode: &str,
    mixed_threshold: usize,
    images: &Path,
    out: &Path,
    optimize_prior: bool,
    seed: Option<u64>,
) -> Result<()> {
    let ckpt = load_checkpoint(ckpt_path)?;
    let net = ckpt.network()?;
    let mut cfg = ckpt.header.config.clone();
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let mode = HessianMode::parse(mode, mixed_threshold)?;
    let ds = load_images(images, None)?;
    let (train, _) = split(&ds, &cfg);
    let rows = train.rows();
    let loss = cfg.loss();
    let ggn = dataset_ggn_diagonal(&net, &ckpt.mean, &rows, mode, &loss, &CurvatureOptions::default())?;
    let gamma2 = if optimize_prior {
        let nll = dataset_nll(&net, &ckpt.mean, &rows, &loss)?;
        optimize_prior_precision(&ckpt.mean, &ggn, nll)
    } else {
        cfg.prior_precision
    };
    cfg.prior_precision = gamma2;
    let post = posterior_from_ggn(&ckpt.mean, &ggn, gamma2, mode)?;
    let nll = mc_nll_mean(&net, &post, &rows, cfg.mc_samples, cfg.seed, &cfg)?;
    let mut fitted = Checkpoint::from_posterior("posthoc", ckpt.header.arch.clone(), cfg, &post);
    fitted.header.train_nll_mean = Some(nll);
    save_checkpoint(out, &fitted)?;
    println!("fitted {} posterior on {} images, prior precision {gamma2}", mode.name(), rows.len());
    Ok(())
}

/// Posterior of a checkpoint, or a point mass at its mean when it has no
/// precision.
fn posterior_or_point(ckpt: &Checkpoint) -> Result<DiagGaussianPosterior> {
    if ckpt.precision.is_some() {
        ckpt.posterior()
    } else {
        Ok(DiagGaussianPosterior::point(ckpt.mean.clone()))
    }
}

#[derive(Serialize)]
struct OodReport {
    checkpoint_kind: String,
    samples: usize,
    seed: u64,
    n_in: usize,
    n_out: usize,
    train_nll_mean: f64,
    auroc: OodAuroc,
}

#[derive(Serialize)]
struct OodAuroc {
    nll: f64,
    typicality: f64,
    sigma_latent: f64,
    sigma_output: f64,
}

fn cmd_eval_ood(ckpt_path: &Path, in_images: &Path, ood_images: &Path, samples: usize, out: &Path, seed: u64) -> Result<()> {
    let ckpt = load_checkpoint(ckpt_path)?;
    let net = ckpt.network()?;
    let post = posterior_or_point(&ckpt)?;
    let loss = ckpt.header.config.loss();
    let din = load_images(in_images, None)?;
    let dout = load_images(ood_images, None)?;
    let (rin, rout) = (din.rows(), dout.rows());
    let train_nll_mean = match ckpt.header.train_nll_mean {
        Some(v) => v,
        None => mc_nll_mean(&net, &post, &rin, samples, seed, &ckpt.header.config)?,
    };
    let sin = ood_scores(&net, &post, &rin, samples, seed, train_nll_mean, &loss)?;
    let sout = ood_scores(&net, &post, &rout, samples, seed, train_nll_mean, &loss)?;
    let report = OodReport {
        checkpoint_kind: ckpt.header.kind.clone(),
        samples,
        seed,
        n_in: rin.len(),
        n_out: rout.len(),
        train_nll_mean,
        auroc: OodAuroc {
            nll: auroc(&sin.nll, &sout.nll)?,
            typicality: auroc(&sin.typicality, &sout.typicality)?,
            sigma_latent: auroc(&sin.sigma_latent, &sout.sigma_latent)?,
            sigma_output: auroc(&sin.sigma_output, &sout.sigma_output)?,
        },
    };
    write_json(out, &report)
}

#[derive(Serialize)]
struct ImputeSummary {
    mask: String,
    chains: usize,
    seed: u64,
    images: Vec<ImputeImage>,
}

#[derive(Serialize)]
struct ImputeImage {
    index: usize,
    masked_variance: f64,
    observed_variance: f64,
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn cmd_impute(ckpt_path: &Path, images: &Path, mask: &str, count: usize, out: &Path, seed: u64) -> Result<()> {
    let ckpt = load_checkpoint(ckpt_path)?;
    let net = ckpt.network()?;
    let post = posterior_or_point(&ckpt)?;
    let ds = load_images(images, None)?;
    let n = count.min(ds.len());
    let cfg = ImputationConfig {
        mask: MaskSpec::parse(mask)?,
        ..ImputationConfig::default()
    };
    let shape = ds.image_shape().to_vec();
    let mut chain_bytes = Vec::new();
    let mut summary = ImputeSummary {
        mask: mask.into(),
        chains: cfg.chain_count,
        seed,
        images: Vec::new(),
    };
    for i in 0..n {
        let imp = impute(&net, &post, ds.image(i), &cfg, lae::rng::derive(seed, i as u64))?;
        let mean_over = |want: bool| {
            let v: Vec<f64> = imp
                .variance
                .iter()
                .zip(&imp.missing)
                .filter(|(_, m)| **m == want)
                .map(|(v, _)| *v)
                .collect();
            if v.is_empty() {
                0.0
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        };
        summary.images.push(ImputeImage {
            index: i,
            masked_variance: mean_over(true),
            observed_variance: mean_over(false),
        });
        for c in &imp.chains {
            chain_bytes.extend(c.iter().map(|v| to_byte(*v)));
        }
    }
    fs::create_dir_all(out)?;
    let mut dims = vec![n, cfg.chain_count];
    match shape.as_slice() {
        [1, h, w] => dims.extend([*h, *w]),
        other => dims.extend_from_slice(other),
    }
    fs::write(out.join("chains-idx-ubyte"), write_idx(&IdxArray { dims, data: chain_bytes }))?;
    write_json(&out.join("summary.json"), &summary)
}

#[allow(clippy::too_many_arguments)]
fn cmd_semisup(
    ckpt_path: &Path,
    det_path: Option<&Path>,
    images: &Path,
    labels: &Path,
    labels_per_class: usize,
    repeats: usize,
    embeddings: usize,
    out: &Path,
    seed: u64,
) -> Result<()> {
    let ckpt = load_checkpoint(ckpt_path)?;
    let net = ckpt.network()?;
    let det_theta = match det_path {
        Some(p) => {
            let d = load_checkpoint(p)?;
            let dnet = d.network()?;
            if dnet.arch() != net.arch() {
                return Err(Error::Checkpoint("deterministic checkpoint has a different architecture".into()));
            }
            d.mean
        }
        None => ckpt.mean.clone(),
    };
    let post = match &ckpt.precision {
        Some(_) => Some(ckpt.posterior()?),
        None => None,
    };
    let ds = load_images(images, Some(labels))?;
    let lab = ds.labels.clone().ok_or_else(|| Error::InvalidArgument("labels are required".into()))?;
    let report = semisup_experiment(
        &net,
        &det_theta,
        post.as_ref(),
        &ds.rows(),
        &lab,
        labels_per_class,
        repeats,
        embeddings,
        seed,
    )?;
    write_json(out, &report)
}

fn cmd_latent_map(ckpt_path: &Path, range: f64, grid: usize, samples: usize, out: &Path, seed: u64) -> Result<()> {
    let ckpt = load_checkpoint(ckpt_path)?;
    let net = ckpt.network()?;
    let post = posterior_or_point(&ckpt)?;
    let map = latent_variance_map(&net, &post, range, grid, samples, seed)?;
    fs::write(with_suffix(out, ".csv"), map.to_csv())?;
    fs::write(with_suffix(out, ".pgm"), map.to_pgm())?;
    Ok(())
}

fn cmd_bench(modes: &[String], sizes: &[usize], repeats: usize, guard: u64, out: &Path, seed: u64) -> Result<()> {
    let modes: Vec<HessianMode> = modes
        .iter()
        .map(|m| HessianMode::parse(m.trim(), DEFAULT_MIXED_THRESHOLD))
        .collect::<Result<_>>()?;
    let records = bench_hessian(&modes, sizes, repeats, seed, guard)?;
    let fits = fit_slopes(&records);
    fs::write(out, records_to_csv(&records))?;
    fs::write(with_suffix(out, ".slopes.csv"), slopes_to_csv(&fits))?;
    fs::write(with_suffix(out, ".timing.csv"), timings_to_csv(&records))?;
    for f in &fits {
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "n/a".into());
        println!(
            "{}: memory exponent {}, time exponent {}",
            f.mode,
            fmt(f.memory_exponent),
            fmt(f.time_exponent)
        );
    }
    Ok(())
}
