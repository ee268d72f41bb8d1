mod common;

use common::{random_net, rel_err, rng, uniform};
use lae::curvature::oracle::{ggn_oracle, layer_jacobians};
use lae::curvature::{
    backstep_input, ggn_backprop, layer_param_curvature, CurvatureState, HessianMode, LayerBlock,
};
use lae::net::{ArchSpec, Batch, LayerSpec, Network};
use lae::LossModel;

fn losses() -> [LossModel; 2] {
    [LossModel::gaussian(0.7).unwrap(), LossModel::Bernoulli]
}

#[test]
fn block_mode_matches_explicit_jacobian_oracle() {
    for seed in 0..12 {
        let (net, p, x) = random_net(seed);
        let t = vec![0.0; net.output_dim()];
        let batch = Batch::supervised(vec![&x], vec![&t]).unwrap();
        for loss in losses() {
            let r = ggn_backprop(&net, &p, &batch, HessianMode::BlockDiagonal, &loss).unwrap();
            let o = ggn_oracle(&net, &p, &x, &loss).unwrap();
            assert_eq!(r.layers.len(), o.blocks.len());
            for (lc, (layer, block)) in r.layers.iter().zip(&o.blocks) {
                assert_eq!(lc.layer, *layer);
                let e = rel_err(lc.block.as_ref().unwrap(), &block.data);
                assert!(e < 1e-8, "seed {seed} layer {layer}: rel err {e}");
            }
        }
    }
}

#[test]
fn exact_diagonal_is_block_diagonal() {
    for seed in 100..110 {
        let (net, p, x) = random_net(seed);
        let batch = Batch::supervised(vec![&x], vec![&x[..0]]).unwrap();
        for loss in losses() {
            let b = ggn_backprop(&net, &p, &batch, HessianMode::BlockDiagonal, &loss).unwrap();
            let e = ggn_backprop(&net, &p, &batch, HessianMode::ExactDiagonal, &loss).unwrap();
            assert!(rel_err(&e.diagonal, &b.diagonal) < 1e-10);
        }
    }
}

#[test]
fn mixed_mode_extremes() {
    for seed in 200..210 {
        let (net, p, x) = random_net(seed);
        let batch = Batch::autoencoding(vec![&x]);
        let loss = LossModel::gaussian(1.3).unwrap();
        let exact = ggn_backprop(&net, &p, &batch, HessianMode::ExactDiagonal, &loss).unwrap();
        let approx = ggn_backprop(&net, &p, &batch, HessianMode::ApproxDiagonal, &loss).unwrap();
        let hi = HessianMode::MixedDiagonal {
            dim_threshold: net.max_feature_size(),
        };
        let lo = HessianMode::MixedDiagonal { dim_threshold: 0 };
        assert_eq!(ggn_backprop(&net, &p, &batch, hi, &loss).unwrap().diagonal, exact.diagonal);
        assert_eq!(ggn_backprop(&net, &p, &batch, lo, &loss).unwrap().diagonal, approx.diagonal);
    }
}

#[test]
fn deep_linear_net_blocks() {
    let mut r = rng(7);
    let net = Network::new(ArchSpec {
        input_shape: vec![4],
        layers: vec![
            LayerSpec::linear(4, 3),
            LayerSpec::linear(3, 5),
            LayerSpec::Linear {
                in_features: 5,
                out_features: 4,
                bias: false,
            },
        ],
        latent_index: 0,
    })
    .unwrap();
    let p = uniform(&mut r, net.num_params(), 1.0);
    let x = uniform(&mut r, 4, 1.0);
    let sigma = 0.4;
    let loss = LossModel::gaussian(sigma).unwrap();
    let res = ggn_backprop(&net, &p, &Batch::autoencoding(vec![&x]), HessianMode::BlockDiagonal, &loss).unwrap();
    let o = ggn_oracle(&net, &p, &x, &loss).unwrap();
    // J^T J / sigma^2 restricted to each layer's columns of the end-to-end Jacobian
    let j = &o.jacobian;
    for lc in &res.layers {
        let mut expect = vec![0.0; lc.len * lc.len];
        for a in 0..lc.len {
            for b in 0..lc.len {
                let s: f64 = (0..j.rows)
                    .map(|r| j.get(r, lc.offset + a) * j.get(r, lc.offset + b))
                    .sum();
                expect[a * lc.len + b] = s / (sigma * sigma);
            }
        }
        assert!(rel_err(lc.block.as_ref().unwrap(), &expect) < 1e-8);
    }
}

#[test]
fn jacobian_matches_directional_finite_differences() {
    for seed in 300..306 {
        let (net, p, x) = random_net(seed);
        let o = ggn_oracle(&net, &p, &x, &LossModel::gaussian(1.0).unwrap()).unwrap();
        let mut r = rng(seed);
        let v = uniform(&mut r, p.len(), 1.0);
        let eps = 1e-5;
        let shift = |s: f64| -> Vec<f64> { p.iter().zip(&v).map(|(a, b)| a + s * b).collect() };
        let fp = net.predict(&shift(eps), &x).unwrap();
        let fm = net.predict(&shift(-eps), &x).unwrap();
        let fd: Vec<f64> = fp.iter().zip(&fm).map(|(a, b)| (a - b) / (2.0 * eps)).collect();
        let jv: Vec<f64> = (0..o.jacobian.rows)
            .map(|row| (0..p.len()).map(|c| o.jacobian.get(row, c) * v[c]).sum())
            .collect();
        let e = rel_err(&jv, &fd);
        assert!(e < 1e-5, "seed {seed}: {e}");
    }
}

#[test]
fn conv_diagonal_backstep_matches_materialized_jacobian() {
    let mut r = rng(11);
    for &(stride, padding, k) in &[(1, 1, 3), (1, 0, 2), (2, 1, 3), (1, 2, 3)] {
        let net = Network::new(ArchSpec {
            input_shape: vec![2, 7, 7],
            layers: vec![
                LayerSpec::Tanh,
                LayerSpec::Conv2d {
                    in_ch: 2,
                    out_ch: 3,
                    kh: k,
                    kw: k,
                    stride,
                    padding,
                    bias: true,
                },
            ],
            latent_index: 0,
        })
        .unwrap();
        let p = uniform(&mut r, net.num_params(), 1.0);
        let x = uniform(&mut r, net.input_dim(), 1.0);
        let t = net.forward(&p, &x).unwrap();
        let m: Vec<f64> = uniform(&mut r, net.size(2), 1.0).iter().map(|v| v.abs()).collect();
        let got = backstep_input(&net, &p, &t, 1, &CurvatureState::Diagonal(m.clone()), false).unwrap();
        let (jx, jp) = layer_jacobians(&net, &p, 1, &t.xs[1], &t.xs[2], None);
        let expect: Vec<f64> = (0..jx.cols)
            .map(|q| (0..jx.rows).map(|o| jx.get(o, q) * jx.get(o, q) * m[o]).sum())
            .collect();
        assert!(rel_err(&got.diagonal(), &expect) < 1e-8);

        // full M through the same layer, parameter block as well
        let a = uniform(&mut r, m.len() * m.len(), 1.0);
        let n = m.len();
        let mut full = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                full[i * n + j] = (0..n).map(|k| a[i * n + k] * a[j * n + k]).sum();
            }
        }
        let mstate = CurvatureState::Full { n, data: full.clone() };
        let blk = layer_param_curvature(&net, &t, 1, &mstate, true).unwrap();
        let mdense = lae::curvature::oracle::Dense { rows: n, cols: n, data: full };
        let expect = jp.sandwich(&mdense);
        match blk {
            LayerBlock::Full(b) => assert!(rel_err(&b, &expect.data) < 1e-8),
            LayerBlock::Diagonal(_) => panic!("expected block"),
        }
        let back = backstep_input(&net, &p, &t, 1, &mstate, true).unwrap();
        let expect = jx.sandwich(&mdense);
        match back {
            CurvatureState::Full { data, .. } => assert!(rel_err(&data, &expect.data) < 1e-8),
            CurvatureState::Diagonal(_) => panic!("expected full"),
        }
    }
}

#[test]
fn bernoulli_output_hessian_matches_finite_differences() {
    let mut r = rng(5);
    let z = uniform(&mut r, 5, 2.0);
    let mut target = vec![0.0; 5];
    target[2] = 1.0;
    let loss = LossModel::Bernoulli;
    let h = lae::curvature::loss_output_hessian(&loss, &z, false);
    let CurvatureState::Full { n, data } = h else { panic!() };
    let eps = 1e-4;
    let mut fd = vec![0.0; n * n];
    for i in 0..n {
        let mut zp = z.clone();
        let mut zm = z.clone();
        zp[i] += eps;
        zm[i] -= eps;
        let gp = loss.gradient(&zp, &target);
        let gm = loss.gradient(&zm, &target);
        for j in 0..n {
            fd[j * n + i] = (gp[j] - gm[j]) / (2.0 * eps);
        }
    }
    assert!(rel_err(&data, &fd) < 1e-5);
}

#[test]
fn two_example_batch_is_additive() {
    let (net, p, x) = random_net(41);
    let mut r = rng(42);
    let x2 = uniform(&mut r, x.len(), 1.0);
    let loss = LossModel::Bernoulli;
    for mode in [HessianMode::BlockDiagonal, HessianMode::ApproxDiagonal] {
        let both = ggn_backprop(&net, &p, &Batch::autoencoding(vec![&x, &x2]), mode, &loss).unwrap();
        let a = ggn_backprop(&net, &p, &Batch::autoencoding(vec![&x]), mode, &loss).unwrap();
        let b = ggn_backprop(&net, &p, &Batch::autoencoding(vec![&x2]), mode, &loss).unwrap();
        let sum: Vec<f64> = a.diagonal.iter().zip(&b.diagonal).map(|(u, v)| u + v).collect();
        assert!(rel_err(&both.diagonal, &sum) < 1e-14);
    }
}

#[test]
fn sigma_scaling() {
    let (net, p, x) = random_net(43);
    let b = Batch::autoencoding(vec![&x]);
    let r1 = ggn_backprop(&net, &p, &b, HessianMode::ApproxDiagonal, &LossModel::gaussian(1.0).unwrap()).unwrap();
    let r3 = ggn_backprop(&net, &p, &b, HessianMode::ApproxDiagonal, &LossModel::gaussian(3.0).unwrap()).unwrap();
    let scaled: Vec<f64> = r1.diagonal.iter().map(|v| v / 9.0).collect();
    assert!(rel_err(&r3.diagonal, &scaled) < 1e-12);
}

#[test]
fn block_is_true_hessian_for_net_linear_in_parameters() {
    let net = Network::new(ArchSpec {
        input_shape: vec![3],
        layers: vec![LayerSpec::linear(3, 2)],
        latent_index: 0,
    })
    .unwrap();
    let mut r = rng(9);
    let p = uniform(&mut r, net.num_params(), 1.0);
    let x = uniform(&mut r, 3, 1.0);
    let t = uniform(&mut r, 2, 1.0);
    let loss = LossModel::gaussian(0.8).unwrap();
    let batch = Batch::supervised(vec![&x], vec![&t]).unwrap();
    let res = ggn_backprop(&net, &p, &batch, HessianMode::BlockDiagonal, &loss).unwrap();
    let w = p.len();
    let eps = 1e-4;
    let mut fd = vec![0.0; w * w];
    for i in 0..w {
        let mut pp = p.clone();
        let mut pm = p.clone();
        pp[i] += eps;
        pm[i] -= eps;
        let gp = lae::net::grad_params(&net, &pp, &batch, &loss).unwrap();
        let gm = lae::net::grad_params(&net, &pm, &batch, &loss).unwrap();
        for j in 0..w {
            fd[j * w + i] = (gp[j] - gm[j]) / (2.0 * eps);
        }
    }
    assert!(rel_err(res.layers[0].block.as_ref().unwrap(), &fd) < 1e-6);
}
