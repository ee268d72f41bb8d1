//! Ready-made autoencoder architectures.

use crate::error::{Error, Result};
use crate::net::{ArchSpec, LayerSpec};
use crate::trainer::{ArchKind, TrainConfig};

/// Tanh MLP `D - hidden.. - K - hidden(rev).. - D` over images of shape
/// `image`. The latent code is the output of the middle linear layer.
pub fn mlp_autoencoder(image: &[usize], hidden: &[usize], latent: usize) -> ArchSpec {
    let d: usize = image.iter().product();
    let mut layers = vec![LayerSpec::Reshape { shape: vec![d] }];
    let mut prev = d;
    for &h in hidden {
        layers.push(LayerSpec::linear(prev, h));
        layers.push(LayerSpec::Tanh);
        prev = h;
    }
    layers.push(LayerSpec::linear(prev, latent));
    let latent_index = layers.len() - 1;
    prev = latent;
    for &h in hidden.iter().rev() {
        layers.push(LayerSpec::linear(prev, h));
        layers.push(LayerSpec::Tanh);
        prev = h;
    }
    layers.push(LayerSpec::linear(prev, d));
    layers.push(LayerSpec::Reshape {
        shape: image.to_vec(),
    });
    ArchSpec {
        input_shape: image.to_vec(),
        layers,
        latent_index,
    }
}

/// Convolutional autoencoder: per entry of `channels` a 3x3 conv, tanh and
/// 2x2 max pool; then a tanh MLP bottleneck through the `hidden` widths to
/// `latent`.
/// The decoder mirrors it with nearest upsampling.
pub fn conv_autoencoder(image: &[usize], channels: &[usize], hidden: &[usize], latent: usize) -> Result<ArchSpec> {
    if image.len() != 3 {
        return Err(Error::Arch(format!("conv autoencoder needs [C, H, W] images, got {image:?}")));
    }
    let scale = 1usize << channels.len();
    if !image[1].is_multiple_of(scale) || !image[2].is_multiple_of(scale) {
        return Err(Error::Arch(format!(
            "image side {}x{} not divisible by {scale}",
            image[1], image[2]
        )));
    }
    let mut layers = Vec::new();
    let mut c = image[0];
    for &ch in channels {
        layers.push(LayerSpec::conv_same(c, ch, 3));
        layers.push(LayerSpec::Tanh);
        layers.push(LayerSpec::MaxPool2d { k: 2 });
        c = ch;
    }
    let inner = vec![c, image[1] / scale, image[2] / scale];
    let flat: usize = inner.iter().product();
    layers.push(LayerSpec::Reshape { shape: vec![flat] });
    let mut width = flat;
    for &h in hidden {
        layers.push(LayerSpec::linear(width, h));
        layers.push(LayerSpec::Tanh);
        width = h;
    }
    layers.push(LayerSpec::linear(width, latent));
    let latent_index = layers.len() - 1;
    width = latent;
    for &h in hidden.iter().rev() {
        layers.push(LayerSpec::linear(width, h));
        layers.push(LayerSpec::Tanh);
        width = h;
    }
    layers.push(LayerSpec::linear(width, flat));
    layers.push(LayerSpec::Tanh);
    layers.push(LayerSpec::Reshape { shape: inner });
    let mut outs: Vec<usize> = channels.iter().rev().skip(1).copied().collect();
    outs.push(image[0]);
    for (i, &out) in outs.iter().enumerate() {
        layers.push(LayerSpec::UpsampleNearest { factor: 2 });
        layers.push(LayerSpec::conv_same(c, out, 3));
        if i + 1 < outs.len() {
            layers.push(LayerSpec::Tanh);
        }
        c = out;
    }
    Ok(ArchSpec {
        input_shape: image.to_vec(),
        layers,
        latent_index,
    })
}

/// Architecture selected by a training config.
pub fn from_config(cfg: &TrainConfig, image: &[usize]) -> Result<ArchSpec> {
    match cfg.arch {
        ArchKind::Mlp => Ok(mlp_autoencoder(image, &cfg.hidden, cfg.latent_dim)),
        ArchKind::Conv => conv_autoencoder(image, &cfg.channels, &cfg.hidden, cfg.latent_dim),
    }
}

/// Five size-preserving 3x3 convolutions with `channels` channels and tanh
/// in between, on `channels x side x side` inputs.
pub fn bench_conv_net(channels: usize, side: usize) -> ArchSpec {
    let mut layers = Vec::new();
    for i in 0..5 {
        if i > 0 {
            layers.push(LayerSpec::Tanh);
        }
        layers.push(LayerSpec::conv_same(channels, channels, 3));
    }
    ArchSpec {
        input_shape: vec![channels, side, side],
        layers,
        latent_index: 4,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::Network;

    #[test]
    fn mlp_shapes() {
        let net = Network::autoencoder(mlp_autoencoder(&[1, 28, 28], &[128, 32], 2)).unwrap();
        assert_eq!(net.latent_dim(), 2);
        assert_eq!(net.layout().slots().len(), 6);
        assert_eq!(net.output_shape(), &[1, 28, 28]);
    }

    #[test]
    fn conv_shapes() {
        let net = Network::autoencoder(conv_autoencoder(&[1, 28, 28], &[8, 16], &[32], 2).unwrap()).unwrap();
        assert_eq!(net.latent_dim(), 2);
        assert_eq!(net.shape(6), &[16, 7, 7]);
        assert!(conv_autoencoder(&[1, 30, 30], &[4, 4], &[8], 2).is_err());
        let deep = Network::autoencoder(conv_autoencoder(&[1, 28, 28], &[8, 16], &[128, 32], 2).unwrap()).unwrap();
        assert_eq!(deep.layout().slots().len(), 10);
        assert_eq!(deep.output_shape(), &[1, 28, 28]);
    }

    #[test]
    fn bench_net_preserves_size() {
        let net = Network::new(bench_conv_net(3, 8)).unwrap();
        assert!((0..=net.num_layers()).all(|i| net.size(i) == 192));
        assert_eq!(net.num_params(), 5 * (81 + 3));
    }
}
