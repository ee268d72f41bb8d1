use std::fs;

mod common;
use common::cli::{lae, ok, p, run_every_command, write_config, SMALL_CONFIG};
use common::write_fixture;

use lae::checkpoint::load_checkpoint;
use lae::curvature::oracle::ggn_oracle;
use lae::dataio::{load_images, training_split};
use tempfile::TempDir;

#[test]
fn unknown_subcommand_fails_with_usage() {
    let out = lae(&["frobnicate"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn missing_input_gives_one_line_diagnostic() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "c.cfg", SMALL_CONFIG);
    let out = lae(&[
        "train-map",
        "--config",
        p(&cfg),
        "--images",
        p(&dir.path().join("absent")),
        "--out",
        p(&dir.path().join("x.ckpt")),
    ]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.starts_with("lae: error:"));
}

#[test]
fn bad_config_names_the_key() {
    let dir = TempDir::new().unwrap();
    let (img, _) = write_fixture(dir.path(), 10, 4);
    let cfg = write_config(dir.path(), "c.cfg", "lr = fast\n");
    let out = lae(&[
        "train-map",
        "--config",
        p(&cfg),
        "--images",
        p(&img),
        "--out",
        p(&dir.path().join("x.ckpt")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("`lr`"));
}

#[test]
fn map_checkpoint_then_exact_fit_matches_the_oracle() {
    let dir = TempDir::new().unwrap();
    let (img, lab) = write_fixture(dir.path(), 12, 2);
    let cfg = write_config(
        dir.path(),
        "toy.cfg",
        "max_epochs = 3\nbatch_size = 4\nhidden =\nlatent_dim = 2\nval_size = 2\nprior_precision = 0.5\n",
    );
    let map = dir.path().join("map.ckpt");
    let fit = dir.path().join("fit.ckpt");
    ok(&["train-map", "--config", p(&cfg), "--images", p(&img), "--labels", p(&lab), "--out", p(&map)]);
    ok(&["fit-laplace", "--ckpt", p(&map), "--mode", "exact", "--images", p(&img), "--out", p(&fit)]);

    let m = load_checkpoint(&map).unwrap();
    let net = m.network().unwrap();
    assert_eq!(net.num_params(), 22);
    let f = load_checkpoint(&fit).unwrap();
    assert_eq!(f.mean, m.mean);
    let cfgv = &m.header.config;
    let ds = load_images(&img, None).unwrap();
    let (train, _) = training_split(&ds, cfgv.val_size, cfgv.max_train, cfgv.seed);
    let mut expect = vec![0.5; net.num_params()];
    for x in train.rows() {
        let d = ggn_oracle(&net, &m.mean, x, &cfgv.loss()).unwrap().diagonal();
        for (e, v) in expect.iter_mut().zip(d) {
            *e += v;
        }
    }
    let got = f.precision.unwrap();
    for (g, e) in got.iter().zip(&expect) {
        assert!((g - e).abs() <= 1e-10 * e.abs().max(1.0), "{g} vs {e}");
    }
}

#[test]
fn ood_with_identical_sets_is_chance() {
    let dir = TempDir::new().unwrap();
    let (img, _) = write_fixture(dir.path(), 40, 6);
    let cfg = write_config(dir.path(), "c.cfg", SMALL_CONFIG);
    let ck = dir.path().join("on.ckpt");
    ok(&["train-online", "--config", p(&cfg), "--images", p(&img), "--out", p(&ck)]);
    let out = dir.path().join("ood.json");
    ok(&[
        "eval-ood",
        "--ckpt",
        p(&ck),
        "--in-images",
        p(&img),
        "--ood-images",
        p(&img),
        "--samples",
        "5",
        "--out",
        p(&out),
    ]);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    for k in ["nll", "typicality", "sigma_latent", "sigma_output"] {
        let a = v["auroc"][k].as_f64().unwrap();
        assert!((a - 0.5).abs() <= 0.05, "{k}: {a}");
    }
}

/// Run every command twice with the same seed; all outputs must match byte
/// for byte.
#[test]
fn every_command_is_byte_reproducible() {
    let dir = TempDir::new().unwrap();
    let a = run_every_command(dir.path(), "a");
    let b = run_every_command(dir.path(), "b");
    assert_eq!(a.len(), b.len());
    for ((name, x), (_, y)) in a.iter().zip(&b) {
        assert!(x == y, "{name} differs between runs");
    }
}

#[test]
fn posterior_commands_reject_a_mismatched_det_checkpoint() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let (img, lab) = write_fixture(d, 30, 6);
    let a = write_config(d, "a.cfg", SMALL_CONFIG);
    let b = write_config(d, "b.cfg", &format!("{SMALL_CONFIG}hidden = 4\n"));
    ok(&["train-online", "--config", p(&a), "--images", p(&img), "--out", p(&d.join("a.ckpt"))]);
    ok(&["train-map", "--config", p(&b), "--images", p(&img), "--out", p(&d.join("b.ckpt"))]);
    let out = lae(&[
        "semisup",
        "--ckpt",
        p(&d.join("a.ckpt")),
        "--det-ckpt",
        p(&d.join("b.ckpt")),
        "--images",
        p(&img),
        "--labels",
        p(&lab),
        "--labels-per-class",
        "2",
        "--repeats",
        "1",
        "--out",
        p(&d.join("s.json")),
    ]);
    assert!(!out.status.success());
}
