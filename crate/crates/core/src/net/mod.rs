//! Layer definitions and the flat parameter layout.
//!
//! A [`Network`] is an ordered list of layers `x_0 -> x_1 -> ... -> x_l`,
//! parametric (linear, convolution) or not (activations, pooling, reshapes).
//! Parameters of all layers live in one flat vector; [`ParamLayout`] records
//! where each parametric layer's block starts.

mod forward;
pub(crate) mod layers;

pub use forward::{grad_params, loss_value, ActivationTrace, Batch};
pub(crate) use forward::{loss_and_grad, CHUNK};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Linear {
        #[serde(rename = "in")]
        in_features: usize,
        #[serde(rename = "out")]
        out_features: usize,
        bias: bool,
    },
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    },
    Tanh,
    Relu,
    MaxPool2d {
        k: usize,
    },
    UpsampleNearest {
        factor: usize,
    },
    Reshape {
        shape: Vec<usize>,
    },
}

impl LayerSpec {
    pub fn linear(in_features: usize, out_features: usize) -> Self {
        Self::Linear {
            in_features,
            out_features,
            bias: true,
        }
    }

    /// Size-preserving 3x3-style convolution (stride 1, padding `k / 2`).
    pub fn conv_same(in_ch: usize, out_ch: usize, k: usize) -> Self {
        Self::Conv2d {
            in_ch,
            out_ch,
            kh: k,
            kw: k,
            stride: 1,
            padding: k / 2,
            bias: true,
        }
    }

    pub fn param_count(&self) -> usize {
        match *self {
            LayerSpec::Linear {
                in_features,
                out_features,
                bias,
            } => out_features * in_features + if bias { out_features } else { 0 },
            LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kh,
                kw,
                bias,
                ..
            } => out_ch * in_ch * kh * kw + if bias { out_ch } else { 0 },
            _ => 0,
        }
    }

    pub fn is_parametric(&self) -> bool {
        matches!(self, LayerSpec::Linear { .. } | LayerSpec::Conv2d { .. })
    }

    /// Output shape for a given input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let numel: usize = input.iter().product();
        match self {
            LayerSpec::Linear {
                in_features,
                out_features,
                ..
            } => {
                if input.len() != 1 || input[0] != *in_features {
                    return Err(Error::Shape(format!(
                        "linear layer expects [{in_features}], got {input:?}"
                    )));
                }
                Ok(vec![*out_features])
            }
            LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kh,
                kw,
                stride,
                padding,
                ..
            } => {
                if input.len() != 3 || input[0] != *in_ch {
                    return Err(Error::Shape(format!(
                        "conv2d expects [{in_ch}, H, W], got {input:?}"
                    )));
                }
                if *stride == 0 {
                    return Err(Error::Arch("conv2d stride must be positive".into()));
                }
                let (h, w) = (input[1] + 2 * padding, input[2] + 2 * padding);
                if h < *kh || w < *kw {
                    return Err(Error::Shape(format!(
                        "kernel {kh}x{kw} larger than padded input {h}x{w}"
                    )));
                }
                Ok(vec![*out_ch, (h - kh) / stride + 1, (w - kw) / stride + 1])
            }
            LayerSpec::Tanh | LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::MaxPool2d { k } => {
                if input.len() != 3 || *k == 0 || input[1] < *k || input[2] < *k {
                    return Err(Error::Shape(format!(
                        "maxpool2d(k={k}) cannot pool {input:?}"
                    )));
                }
                Ok(vec![input[0], input[1] / k, input[2] / k])
            }
            LayerSpec::UpsampleNearest { factor } => {
                if input.len() != 3 || *factor == 0 {
                    return Err(Error::Shape(format!(
                        "upsample(factor={factor}) cannot scale {input:?}"
                    )));
                }
                Ok(vec![input[0], input[1] * factor, input[2] * factor])
            }
            LayerSpec::Reshape { shape } => {
                if shape.iter().product::<usize>() != numel || shape.contains(&0) {
                    return Err(Error::Shape(format!(
                        "cannot reshape {input:?} into {shape:?}"
                    )));
                }
                Ok(shape.clone())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    /// Index of the layer whose output is the latent code.
    pub latent_index: usize,
}

/// Offset and length of one parametric layer inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamSlot {
    pub layer: usize,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    slots: Vec<ParamSlot>,
    total: usize,
}

impl ParamLayout {
    pub fn slots(&self) -> &[ParamSlot] {
        &self.slots
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn slot_for_layer(&self, layer: usize) -> Option<&ParamSlot> {
        self.slots.iter().find(|s| s.layer == layer)
    }
}

/// Flat parameter vector `theta` together with its per-layer layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub values: Vec<f64>,
    pub layout: ParamLayout,
}

impl ParamVector {
    pub fn zeros(layout: &ParamLayout) -> Self {
        Self {
            values: vec![0.0; layout.total],
            layout: layout.clone(),
        }
    }

    pub fn from_values(layout: &ParamLayout, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.total {
            return Err(Error::Shape(format!(
                "parameter vector of length {} does not match layout total {}",
                values.len(),
                layout.total
            )));
        }
        Ok(Self {
            values,
            layout: layout.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn layer(&self, slot: &ParamSlot) -> &[f64] {
        &self.values[slot.offset..slot.offset + slot.len]
    }

    pub fn norm_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }
}

/// A validated network: shapes of every activation `x_0..x_l` and the
/// parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    arch: ArchSpec,
    shapes: Vec<Vec<usize>>,
    layout: ParamLayout,
}

impl Network {
    /// Validate shape composition and compute the parameter layout.
    pub fn new(arch: ArchSpec) -> Result<Self> {
        if arch.layers.is_empty() {
            return Err(Error::Arch("network has no layers".into()));
        }
        if arch.latent_index >= arch.layers.len() {
            return Err(Error::Arch(format!(
                "latent_index {} out of range for {} layers",
                arch.latent_index,
                arch.layers.len()
            )));
        }
        if arch.input_shape.is_empty() || arch.input_shape.contains(&0) {
            return Err(Error::Shape(format!(
                "invalid input shape {:?}",
                arch.input_shape
            )));
        }
        let mut shapes = vec![arch.input_shape.clone()];
        let mut slots = Vec::new();
        let mut offset = 0;
        for (i, layer) in arch.layers.iter().enumerate() {
            let out = layer
                .output_shape(shapes.last().unwrap())
                .map_err(|e| Error::Shape(format!("layer {i}: {e}")))?;
            shapes.push(out);
            let len = layer.param_count();
            if len > 0 {
                slots.push(ParamSlot {
                    layer: i,
                    offset,
                    len,
                });
                offset += len;
            }
        }
        Ok(Self {
            arch,
            shapes,
            layout: ParamLayout {
                slots,
                total: offset,
            },
        })
    }

    /// Like [`Network::new`] but also requires autoencoder closure (output
    /// shape equals input shape) and a latent code smaller than the input.
    pub fn autoencoder(arch: ArchSpec) -> Result<Self> {
        let net = Self::new(arch)?;
        if net.output_shape() != net.input_shape() {
            return Err(Error::Arch(format!(
                "output shape {:?} differs from input shape {:?}",
                net.output_shape(),
                net.input_shape()
            )));
        }
        if net.latent_dim() >= net.input_dim() {
            return Err(Error::Arch(format!(
                "latent dimension {} is not smaller than input dimension {}",
                net.latent_dim(),
                net.input_dim()
            )));
        }
        Ok(net)
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.arch.layers
    }

    pub fn num_layers(&self) -> usize {
        self.arch.layers.len()
    }

    /// Shape of activation `x_i`; `x_0` is the input.
    pub fn shape(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    pub fn size(&self, i: usize) -> usize {
        self.shapes[i].iter().product()
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.shapes[0]
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().unwrap()
    }

    pub fn input_dim(&self) -> usize {
        self.size(0)
    }

    pub fn output_dim(&self) -> usize {
        self.size(self.num_layers())
    }

    pub fn latent_index(&self) -> usize {
        self.arch.latent_index
    }

    pub fn latent_dim(&self) -> usize {
        self.size(self.arch.latent_index + 1)
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn num_params(&self) -> usize {
        self.layout.total
    }

    /// `R_m = max_l |x_l|`.
    pub fn max_feature_size(&self) -> usize {
        (0..=self.num_layers()).map(|i| self.size(i)).max().unwrap()
    }

    /// `R_s = sum_l |x_l|`.
    pub fn total_feature_size(&self) -> usize {
        (0..=self.num_layers()).map(|i| self.size(i)).sum()
    }

    pub(crate) fn check_params(&self, params: &[f64]) -> Result<()> {
        if params.len() != self.layout.total {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.layout.total,
                params.len()
            )));
        }
        Ok(())
    }

    pub(crate) fn layer_params<'p>(&self, layer: usize, params: &'p [f64]) -> &'p [f64] {
        match self.layout.slot_for_layer(layer) {
            Some(s) => &params[s.offset..s.offset + s.len],
            None => &[],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_ae() -> ArchSpec {
        ArchSpec {
            input_shape: vec![4],
            layers: vec![LayerSpec::linear(4, 2), LayerSpec::Tanh, LayerSpec::linear(2, 4)],
            latent_index: 0,
        }
    }

    #[test]
    fn parameter_count_of_tiny_autoencoder() {
        let net = Network::autoencoder(tiny_ae()).unwrap();
        assert_eq!(net.num_params(), 22);
        assert_eq!(net.latent_dim(), 2);
        let slots = net.layout().slots();
        assert_eq!(slots.len(), 2);
        assert_eq!((slots[0].offset, slots[0].len), (0, 10));
        assert_eq!((slots[1].offset, slots[1].len), (10, 12));
    }

    #[test]
    fn conv_without_bias_counts_kernel_only() {
        let conv = LayerSpec::Conv2d {
            in_ch: 1,
            out_ch: 2,
            kh: 3,
            kw: 3,
            stride: 1,
            padding: 1,
            bias: false,
        };
        assert_eq!(conv.param_count(), 18);
        assert_eq!(LayerSpec::Tanh.param_count(), 0);
        assert_eq!(LayerSpec::MaxPool2d { k: 2 }.param_count(), 0);
    }

    #[test]
    fn composition_violation_is_rejected() {
        let arch = ArchSpec {
            input_shape: vec![3],
            layers: vec![LayerSpec::linear(3, 2), LayerSpec::linear(4, 3)],
            latent_index: 0,
        };
        assert!(matches!(Network::new(arch), Err(Error::Shape(_))));
    }

    #[test]
    fn latent_index_out_of_range() {
        let mut arch = tiny_ae();
        arch.latent_index = 3;
        assert!(matches!(Network::new(arch), Err(Error::Arch(_))));
    }

    #[test]
    fn autoencoder_closure_and_bottleneck() {
        let arch = ArchSpec {
            input_shape: vec![4],
            layers: vec![LayerSpec::linear(4, 3)],
            latent_index: 0,
        };
        assert!(Network::new(arch.clone()).is_ok());
        assert!(Network::autoencoder(arch).is_err());
        let wide = ArchSpec {
            input_shape: vec![2],
            layers: vec![LayerSpec::linear(2, 4), LayerSpec::linear(4, 2)],
            latent_index: 0,
        };
        assert!(Network::autoencoder(wide).is_err());
    }

    #[test]
    fn conv_shapes_compose() {
        let arch = ArchSpec {
            input_shape: vec![1, 8, 8],
            layers: vec![
                LayerSpec::conv_same(1, 2, 3),
                LayerSpec::MaxPool2d { k: 2 },
                LayerSpec::Reshape { shape: vec![32] },
                LayerSpec::linear(32, 3),
                LayerSpec::linear(3, 32),
                LayerSpec::Reshape {
                    shape: vec![2, 4, 4],
                },
                LayerSpec::UpsampleNearest { factor: 2 },
                LayerSpec::conv_same(2, 1, 3),
            ],
            latent_index: 3,
        };
        let net = Network::autoencoder(arch).unwrap();
        assert_eq!(net.shape(2), &[2, 4, 4]);
        assert_eq!(net.latent_dim(), 3);
        assert_eq!(net.max_feature_size(), 128);
    }

    #[test]
    fn arch_round_trips_through_json() {
        let arch = tiny_ae();
        let s = serde_json::to_string(&arch).unwrap();
        let back: ArchSpec = serde_json::from_str(&s).unwrap();
        assert_eq!(arch, back);
    }
}
