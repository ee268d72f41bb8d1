//! Helpers for driving the `lae` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use super::write_fixture;

pub fn lae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lae")).args(args).output().expect("binary runs")
}

pub fn ok(args: &[&str]) -> Output {
    let out = lae(args);
    assert!(
        out.status.success(),
        "lae {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

pub fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path
}

pub const SMALL_CONFIG: &str = "\
# tiny network for fast command tests
max_epochs = 2
batch_size = 8
hidden = 6
latent_dim = 2
val_size = 8
mc_samples = 4
seed = 3
";

/// Run every subcommand once on a small fixture under `root/tag` and return
/// `(file name, bytes)` of every deterministic output.
pub fn run_every_command(root: &Path, tag: &str) -> Vec<(String, Vec<u8>)> {
    let o = root.join(tag);
    fs::create_dir_all(&o).unwrap();
    let (img, lab) = write_fixture(&o, 48, 6);
    let cfg = write_config(&o, "c.cfg", SMALL_CONFIG);
    let j = |n: &str| o.join(n);
    ok(&["train-map", "--config", p(&cfg), "--images", p(&img), "--labels", p(&lab), "--out", p(&j("map.ckpt"))]);
    ok(&["train-online", "--config", p(&cfg), "--images", p(&img), "--out", p(&j("on.ckpt"))]);
    ok(&[
        "fit-laplace",
        "--ckpt",
        p(&j("map.ckpt")),
        "--mode",
        "mixed",
        "--images",
        p(&img),
        "--out",
        p(&j("fit.ckpt")),
        "--optimize-prior",
    ]);
    ok(&[
        "--seed",
        "5",
        "eval-ood",
        "--ckpt",
        p(&j("on.ckpt")),
        "--in-images",
        p(&img),
        "--ood-images",
        p(&img),
        "--samples",
        "4",
        "--out",
        p(&j("ood.json")),
    ]);
    ok(&[
        "impute",
        "--ckpt",
        p(&j("on.ckpt")),
        "--images",
        p(&img),
        "--mask",
        "half",
        "--seed",
        "2",
        "--count",
        "2",
        "--out",
        p(&j("imp")),
    ]);
    ok(&[
        "semisup",
        "--ckpt",
        p(&j("on.ckpt")),
        "--det-ckpt",
        p(&j("map.ckpt")),
        "--images",
        p(&img),
        "--labels",
        p(&lab),
        "--labels-per-class",
        "3",
        "--repeats",
        "2",
        "--embeddings",
        "3",
        "--out",
        p(&j("semi.json")),
    ]);
    ok(&[
        "latent-map",
        "--ckpt",
        p(&j("on.ckpt")),
        "--range",
        "2",
        "--grid",
        "5",
        "--samples",
        "3",
        "--out",
        p(&j("lat")),
    ]);
    ok(&[
        "bench-hessian",
        "--modes",
        "approx,exact",
        "--sizes",
        "4,8",
        "--repeats",
        "1",
        "--out",
        p(&j("bench.csv")),
    ]);
    [
        "map.ckpt",
        "map.ckpt.train.csv",
        "on.ckpt",
        "on.ckpt.train.csv",
        "fit.ckpt",
        "ood.json",
        "imp/chains-idx-ubyte",
        "imp/summary.json",
        "semi.json",
        "lat.csv",
        "lat.pgm",
        "bench.csv",
        "bench.csv.slopes.csv",
    ]
    .iter()
    .map(|n| (n.to_string(), fs::read(j(n)).unwrap()))
    .collect()
}
