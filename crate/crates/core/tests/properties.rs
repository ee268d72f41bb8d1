mod common;

use approx::assert_relative_eq;
use proptest::prelude::*;

use common::random_net;
use lae::checkpoint::Checkpoint;
use lae::curvature::{ggn_backprop, HessianMode};
use lae::dataio::{parse_idx, split_indices, write_idx, IdxArray};
use lae::net::{ArchSpec, Batch, LayerSpec, Network};
use lae::posterior::{
    optimize_prior_precision, posterior_from_ggn, posterior_predict, DiagGaussianPosterior,
};
use lae::tasks::{auroc, calibration};
use lae::{LossModel, TrainConfig};

fn probe_net() -> Network {
    Network::new(ArchSpec {
        input_shape: vec![1],
        layers: vec![LayerSpec::Linear {
            in_features: 1,
            out_features: 1,
            bias: false,
        }],
        latent_index: 0,
    })
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn ggn_diagonals_are_nonnegative_and_modes_agree_on_block_diagonal(seed in 0u64..10_000) {
        let (net, p, x) = random_net(seed);
        let b = Batch::autoencoding(vec![&x]);
        let loss = LossModel::gaussian(1.0).unwrap();
        let block = ggn_backprop(&net, &p, &b, HessianMode::BlockDiagonal, &loss).unwrap();
        let exact = ggn_backprop(&net, &p, &b, HessianMode::ExactDiagonal, &loss).unwrap();
        let approx = ggn_backprop(&net, &p, &b, HessianMode::ApproxDiagonal, &loss).unwrap();
        prop_assert!(approx.diagonal.iter().all(|v| *v >= 0.0));
        prop_assert!(exact.diagonal.iter().all(|v| *v >= -1e-12));
        for (a, e) in block.diagonal.iter().zip(&exact.diagonal) {
            prop_assert!((a - e).abs() <= 1e-10 * (1.0 + e.abs()));
        }
    }

    #[test]
    fn posthoc_precision_is_at_least_the_prior(
        ggn in prop::collection::vec(0.0f64..1e3, 1..50),
        gamma2 in 1e-4f64..1e4,
    ) {
        let theta = vec![0.5; ggn.len()];
        let post = posterior_from_ggn(&theta, &ggn, gamma2, HessianMode::ApproxDiagonal).unwrap();
        prop_assert!(post.precision.iter().all(|h| *h >= gamma2));
    }

    #[test]
    fn larger_weights_never_raise_the_selected_prior(
        ggn in prop::collection::vec(0.0f64..100.0, 5..40),
        scale in 0.1f64..10.0,
    ) {
        let theta: Vec<f64> = (0..ggn.len()).map(|i| 0.1 + 0.01 * i as f64).collect();
        let bigger: Vec<f64> = theta.iter().map(|t| t * (1.0 + scale)).collect();
        let a = optimize_prior_precision(&theta, &ggn, 0.0);
        let b = optimize_prior_precision(&bigger, &ggn, 0.0);
        prop_assert!(b <= a);
    }

    #[test]
    fn output_variance_shrinks_as_precision_grows(h in 0.01f64..100.0, factor in 1.0f64..50.0) {
        let net = probe_net();
        let loss = LossModel::gaussian(1.0).unwrap();
        let lo = DiagGaussianPosterior::new(vec![1.0], vec![h]).unwrap();
        let hi = DiagGaussianPosterior::new(vec![1.0], vec![h * factor]).unwrap();
        let a = posterior_predict(&net, &lo, &[2.0], 200, 3, &loss).unwrap();
        let b = posterior_predict(&net, &hi, &[2.0], 200, 3, &loss).unwrap();
        prop_assert!(b.output_var[0] <= a.output_var[0] * (1.0 + 1e-12));
    }

    #[test]
    fn single_sample_nll_is_plain_gaussian_nll(w in -3.0f64..3.0, x in -2.0f64..2.0, sigma in 0.2f64..3.0) {
        let net = probe_net();
        let loss = LossModel::gaussian(sigma).unwrap();
        let post = DiagGaussianPosterior::point(vec![w]);
        let u = posterior_predict(&net, &post, &[x], 1, 0, &loss).unwrap();
        let plain = 0.5 * (w * x - x).powi(2) / (sigma * sigma);
        prop_assert!((u.nll - plain).abs() <= 1e-12 * (1.0 + plain));
        prop_assert_eq!(u.output_var[0], 0.0);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact(
        mean in prop::collection::vec(-1e6f64..1e6, 2..=2),
        prec in prop::collection::vec(1e-8f64..1e8, 2..=2),
    ) {
        let arch = ArchSpec {
            input_shape: vec![1],
            layers: vec![LayerSpec::linear(1, 1)],
            latent_index: 0,
        };
        let post = DiagGaussianPosterior::new(mean.clone(), prec.clone()).unwrap();
        let c = Checkpoint::from_posterior("online", arch, TrainConfig::default(), &post);
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&back.mean), bits(&mean));
        prop_assert_eq!(bits(back.precision.as_ref().unwrap()), bits(&prec));
        prop_assert_eq!(back.header, c.header);
    }

    #[test]
    fn idx_round_trip(rows in 1usize..5, cols in 1usize..5, n in 0usize..4, fill in any::<u8>()) {
        let data: Vec<u8> = (0..n * rows * cols).map(|i| fill.wrapping_add(i as u8)).collect();
        let arr = IdxArray { dims: vec![n, rows, cols], data };
        prop_assert_eq!(parse_idx(&write_idx(&arr)).unwrap(), arr);
    }

    #[test]
    fn split_is_a_partition(n in 0usize..200, val in 0usize..250, seed in any::<u64>()) {
        let (tr, va) = split_indices(n, val, seed);
        prop_assert_eq!(va.len(), val.min(n));
        let mut all: Vec<usize> = tr.iter().chain(&va).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn auroc_is_antisymmetric(
        a in prop::collection::vec(-5.0f64..5.0, 1..30),
        b in prop::collection::vec(-5.0f64..5.0, 1..30),
    ) {
        let ab = auroc(&a, &b).unwrap();
        let ba = auroc(&b, &a).unwrap();
        prop_assert!((0.0..=1.0).contains(&ab));
        assert_relative_eq!(ab + ba, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn calibration_errors_are_ordered(
        conf in prop::collection::vec(0.0f64..1.0, 1..60),
        flip in prop::collection::vec(any::<bool>(), 60),
    ) {
        let probs: Vec<Vec<f64>> = conf.iter().map(|c| vec![*c, 1.0 - c]).collect();
        let labels: Vec<usize> = conf.iter().zip(&flip).map(|(_, f)| usize::from(*f)).collect();
        let r = calibration(&probs, &labels, 10).unwrap();
        prop_assert!(r.ece >= 0.0 && r.ece <= r.rmsce + 1e-12 && r.rmsce <= r.mce + 1e-12 && r.mce <= 1.0);
    }
}
