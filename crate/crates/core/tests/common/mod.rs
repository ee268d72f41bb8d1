#![allow(dead_code)]

pub mod cli;

use std::fs;
use std::path::{Path, PathBuf};

use lae::dataio::{write_idx, IdxArray};

use lae::net::{loss_value, ArchSpec, Batch, LayerSpec, Network};
use lae::LossModel;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

fn activation(rng: &mut ChaCha8Rng) -> LayerSpec {
    if rng.random_bool(0.5) {
        LayerSpec::Tanh
    } else {
        LayerSpec::Relu
    }
}

/// Random small network mixing every layer type, with `W_s <= 2000`.
/// Returns `(network, params, input)`.
pub fn random_net(seed: u64) -> (Network, Vec<f64>, Vec<f64>) {
    let mut r = rng(seed);
    loop {
        let c = r.random_range(1..=2);
        let side = [4, 6, 8][r.random_range(0..3)];
        let mut shape = vec![c, side, side];
        let mut layers = Vec::new();
        let n_conv = r.random_range(1..=2);
        for _ in 0..n_conv {
            let k = r.random_range(1..=3);
            let out_ch = r.random_range(1..=3);
            let stride = if shape[1] >= 6 && r.random_bool(0.25) { 2 } else { 1 };
            let padding = r.random_range(0..=k / 2);
            let l = LayerSpec::Conv2d {
                in_ch: shape[0],
                out_ch,
                kh: k,
                kw: k,
                stride,
                padding,
                bias: r.random_bool(0.7),
            };
            let Ok(s) = l.output_shape(&shape) else { break };
            layers.push(l);
            shape = s;
            layers.push(activation(&mut r));
            if shape[1] >= 2 && shape[1] % 2 == 0 && r.random_bool(0.5) {
                layers.push(LayerSpec::MaxPool2d { k: 2 });
                shape = vec![shape[0], shape[1] / 2, shape[2] / 2];
            }
            if shape[1] <= 3 && r.random_bool(0.5) {
                layers.push(LayerSpec::UpsampleNearest { factor: 2 });
                shape = vec![shape[0], shape[1] * 2, shape[2] * 2];
            }
        }
        let flat: usize = shape.iter().product();
        layers.push(LayerSpec::Reshape { shape: vec![flat] });
        let hidden = r.random_range(2..=6);
        layers.push(LayerSpec::Linear {
            in_features: flat,
            out_features: hidden,
            bias: r.random_bool(0.7),
        });
        layers.push(activation(&mut r));
        let out = r.random_range(2..=8);
        layers.push(LayerSpec::linear(hidden, out));
        let arch = ArchSpec {
            input_shape: vec![c, side, side],
            layers,
            latent_index: 0,
        };
        let Ok(net) = Network::new(arch) else { continue };
        if net.num_params() == 0 || net.num_params() > 2000 {
            continue;
        }
        let p = uniform(&mut r, net.num_params(), 0.6);
        let x = uniform(&mut r, net.input_dim(), 1.0);
        return (net, p, x);
    }
}

pub fn conv(in_ch: usize, out_ch: usize, k: usize, stride: usize, padding: usize, bias: bool) -> LayerSpec {
    LayerSpec::Conv2d {
        in_ch,
        out_ch,
        kh: k,
        kw: k,
        stride,
        padding,
        bias,
    }
}

/// A parametric conv, then `middle`, then a linear read-out, so gradients
/// of the first conv pass through the input Jacobian of `middle`.
pub fn net_around(middle: Vec<LayerSpec>, out: usize) -> Network {
    let mut layers = vec![conv(2, 2, 3, 1, 1, true)];
    let mut shape = vec![2, 4, 4];
    for l in &middle {
        shape = l.output_shape(&shape).unwrap();
    }
    layers.extend(middle);
    let flat: usize = shape.iter().product();
    layers.push(LayerSpec::Reshape { shape: vec![flat] });
    layers.push(LayerSpec::linear(flat, out));
    Network::new(ArchSpec {
        input_shape: vec![2, 4, 4],
        layers,
        latent_index: 0,
    })
    .unwrap()
}

pub fn fd_cases() -> Vec<(&'static str, Network)> {
    vec![
        ("conv_strided_no_bias", net_around(vec![conv(2, 3, 3, 2, 1, false)], 3)),
        ("conv_one_by_one", net_around(vec![conv(2, 2, 1, 1, 0, true)], 3)),
        ("tanh", net_around(vec![LayerSpec::Tanh], 3)),
        ("relu", net_around(vec![LayerSpec::Relu], 3)),
        ("maxpool", net_around(vec![LayerSpec::MaxPool2d { k: 2 }], 3)),
        ("upsample", net_around(vec![LayerSpec::UpsampleNearest { factor: 2 }], 3)),
        (
            "linear",
            net_around(
                vec![LayerSpec::Reshape { shape: vec![32] }, LayerSpec::linear(32, 5), LayerSpec::Tanh],
                3,
            ),
        ),
        ("reshape", net_around(vec![LayerSpec::Reshape { shape: vec![2, 16] }], 3)),
    ]
}

pub fn fd_losses() -> [(&'static str, LossModel); 2] {
    [("gaussian", LossModel::gaussian(0.8).unwrap()), ("bernoulli", LossModel::Bernoulli)]
}

/// Central differences of the summed loss, with inputs kept away from ReLU
/// kinks and max-pool ties by the random draw.
pub fn fd_gradient(net: &Network, p: &[f64], batch: &Batch<'_>, loss: &LossModel) -> Vec<f64> {
    let eps = 1e-5;
    (0..p.len())
        .map(|j| {
            let mut pp = p.to_vec();
            let mut pm = p.to_vec();
            pp[j] += eps;
            pm[j] -= eps;
            (loss_value(net, &pp, batch, loss).unwrap() - loss_value(net, &pm, batch, loss).unwrap()) / (2.0 * eps)
        })
        .collect()
}

/// Two clusters of `side x side` images: bright left half (label 0) or
/// bright right half (label 1), with a little deterministic texture.
pub fn write_fixture(dir: &Path, n: usize, side: usize) -> (PathBuf, PathBuf) {
    let mut data = Vec::with_capacity(n * side * side);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = (i % 2) as u8;
        labels.push(label);
        for r in 0..side {
            for c in 0..side {
                let bright = (c < side / 2) == (label == 0);
                let base: u32 = if bright { 200 } else { 30 };
                let texture = ((i * 7 + r * 3 + c * 5) % 11) as u32 * 4;
                data.push((base + texture).min(255) as u8);
            }
        }
    }
    let img = dir.join(format!("images-{side}"));
    let lab = dir.join(format!("labels-{side}"));
    fs::write(&img, write_idx(&IdxArray { dims: vec![n, side, side], data })).unwrap();
    fs::write(&lab, write_idx(&IdxArray { dims: vec![n], data: labels })).unwrap();
    (img, lab)
}
