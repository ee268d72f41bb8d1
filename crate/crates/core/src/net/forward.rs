use rayon::prelude::*;

use super::layers::{self, ConvGeom};
use super::{LayerSpec, Network};
use crate::error::{Error, Result};
use crate::loss::LossModel;
use crate::tensor::{pairwise_sum, Tensor};

/// Examples per work unit. Fixed so reductions do not depend on the thread
/// count.
pub(crate) const CHUNK: usize = 8;

/// Activations `x_0..x_l` of one example plus the maxpool argmax records.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    pub xs: Vec<Vec<f64>>,
    pub argmax: Vec<Option<Vec<usize>>>,
}

impl ActivationTrace {
    pub fn output(&self) -> &[f64] {
        self.xs.last().unwrap()
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }
}

/// Inputs and reconstruction targets. For an autoencoder the targets are
/// the inputs themselves.
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    pub inputs: Vec<&'a [f64]>,
    pub targets: Vec<&'a [f64]>,
}

impl<'a> Batch<'a> {
    pub fn autoencoding(inputs: Vec<&'a [f64]>) -> Self {
        Self {
            targets: inputs.clone(),
            inputs,
        }
    }

    pub fn supervised(inputs: Vec<&'a [f64]>, targets: Vec<&'a [f64]>) -> Result<Self> {
        if inputs.len() != targets.len() {
            return Err(Error::Shape(format!(
                "{} inputs but {} targets",
                inputs.len(),
                targets.len()
            )));
        }
        Ok(Self { inputs, targets })
    }

    /// All rows of an `N x ...` tensor, autoencoding.
    pub fn from_tensor(t: &'a Tensor) -> Self {
        Self::autoencoding((0..t.rows()).map(|i| t.row(i)).collect())
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

impl Network {
    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input of length {} does not match input shape {:?}",
                x.len(),
                self.input_shape()
            )));
        }
        Ok(())
    }

    /// Run layers `range` on `x`, which must be the activation entering the
    /// first layer of the range.
    fn run_layers(
        &self,
        params: &[f64],
        x: &[f64],
        range: std::ops::Range<usize>,
        xs: &mut Vec<Vec<f64>>,
        argmax: &mut Vec<Option<Vec<usize>>>,
    ) {
        let mut cur = x.to_vec();
        for i in range {
            let layer = &self.arch.layers[i];
            let mut y = vec![0.0; self.size(i + 1)];
            let mut arg = None;
            let p = self.layer_params(i, params);
            match *layer {
                LayerSpec::Linear {
                    in_features,
                    out_features,
                    bias,
                } => layers::linear_forward(p, in_features, out_features, bias, &cur, &mut y),
                LayerSpec::Conv2d { .. } => {
                    ConvGeom::new(layer, self.shape(i), self.shape(i + 1)).forward(p, &cur, &mut y)
                }
                LayerSpec::Tanh => {
                    for (yv, xv) in y.iter_mut().zip(&cur) {
                        *yv = xv.tanh();
                    }
                }
                LayerSpec::Relu => {
                    for (yv, xv) in y.iter_mut().zip(&cur) {
                        *yv = if *xv > 0.0 { *xv } else { 0.0 };
                    }
                }
                LayerSpec::MaxPool2d { k } => {
                    arg = Some(layers::maxpool_forward(self.shape(i), k, &cur, &mut y));
                }
                LayerSpec::UpsampleNearest { factor } => {
                    for (yv, s) in y.iter_mut().zip(layers::upsample_sources(self.shape(i), factor)) {
                        *yv = cur[s];
                    }
                }
                LayerSpec::Reshape { .. } => y.copy_from_slice(&cur),
            }
            xs.push(std::mem::replace(&mut cur, y));
            argmax.push(arg);
        }
        xs.push(cur);
    }

    /// Forward pass of one example recording every activation.
    pub fn forward(&self, params: &[f64], x: &[f64]) -> Result<ActivationTrace> {
        self.check_params(params)?;
        self.check_input(x)?;
        let mut xs = Vec::with_capacity(self.num_layers() + 1);
        let mut argmax = Vec::with_capacity(self.num_layers());
        self.run_layers(params, x, 0..self.num_layers(), &mut xs, &mut argmax);
        Ok(ActivationTrace { xs, argmax })
    }

    /// Forward pass over a batch tensor of shape `[N, input_shape..]`.
    pub fn forward_batch(&self, params: &[f64], batch: &Tensor) -> Result<Vec<ActivationTrace>> {
        (0..batch.rows())
            .into_par_iter()
            .map(|i| self.forward(params, batch.row(i)))
            .collect()
    }

    /// Reconstruction `f_theta(x)`.
    pub fn predict(&self, params: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(params, x)?.xs.pop().unwrap())
    }

    /// Latent code: output of layers `0..=latent_index`.
    pub fn encode(&self, params: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        self.check_params(params)?;
        self.check_input(x)?;
        let mut xs = Vec::new();
        let mut argmax = Vec::new();
        self.run_layers(params, x, 0..self.latent_index() + 1, &mut xs, &mut argmax);
        Ok(xs.pop().unwrap())
    }

    /// Reconstruction from a latent code: remaining layers after `latent_index`.
    pub fn decode(&self, params: &[f64], z: &[f64]) -> Result<Vec<f64>> {
        self.check_params(params)?;
        if z.len() != self.latent_dim() {
            return Err(Error::Shape(format!(
                "latent code of length {} does not match latent dimension {}",
                z.len(),
                self.latent_dim()
            )));
        }
        let mut xs = Vec::new();
        let mut argmax = Vec::new();
        self.run_layers(params, z, self.latent_index() + 1..self.num_layers(), &mut xs, &mut argmax);
        Ok(xs.pop().unwrap())
    }

    /// Encoder-only trace `x_0..x_{latent_index+1}`.
    pub fn encode_trace(&self, params: &[f64], x: &[f64]) -> Result<ActivationTrace> {
        self.check_params(params)?;
        self.check_input(x)?;
        let mut xs = Vec::new();
        let mut argmax = Vec::new();
        self.run_layers(params, x, 0..self.latent_index() + 1, &mut xs, &mut argmax);
        Ok(ActivationTrace { xs, argmax })
    }

    /// `J_{x_{i}} f_{L_i}^T g`: pull a cotangent on `x_{i+1}` back to `x_i`.
    pub(crate) fn vjp_input(
        &self,
        params: &[f64],
        trace: &ActivationTrace,
        i: usize,
        gy: &[f64],
    ) -> Vec<f64> {
        let layer = &self.arch.layers[i];
        let mut gx = vec![0.0; self.size(i)];
        let p = self.layer_params(i, params);
        match *layer {
            LayerSpec::Linear {
                in_features,
                out_features,
                ..
            } => layers::linear_input_grad(p, in_features, out_features, gy, &mut gx),
            LayerSpec::Conv2d { .. } => {
                let g = ConvGeom::new(layer, self.shape(i), self.shape(i + 1));
                g.correlate_transpose(&p[..g.kernel_len()], gy, &mut gx);
            }
            LayerSpec::Tanh => {
                for ((gxv, gyv), y) in gx.iter_mut().zip(gy).zip(&trace.xs[i + 1]) {
                    *gxv = gyv * (1.0 - y * y);
                }
            }
            LayerSpec::Relu => {
                for ((gxv, gyv), x) in gx.iter_mut().zip(gy).zip(&trace.xs[i]) {
                    *gxv = if *x > 0.0 { *gyv } else { 0.0 };
                }
            }
            LayerSpec::MaxPool2d { .. } => {
                let arg = trace.argmax[i].as_ref().expect("maxpool trace without argmax");
                for (o, &s) in arg.iter().enumerate() {
                    gx[s] += gy[o];
                }
            }
            LayerSpec::UpsampleNearest { factor } => {
                for (o, s) in layers::upsample_sources(self.shape(i), factor).into_iter().enumerate() {
                    gx[s] += gy[o];
                }
            }
            LayerSpec::Reshape { .. } => gx.copy_from_slice(gy),
        }
        gx
    }

    /// Accumulate `J_{phi_i}^T gy` into the layer's slice of `grad`.
    fn vjp_params(&self, trace: &ActivationTrace, i: usize, gy: &[f64], grad: &mut [f64]) {
        let Some(slot) = self.layout.slot_for_layer(i).copied() else {
            return;
        };
        let gp = &mut grad[slot.offset..slot.offset + slot.len];
        let layer = &self.arch.layers[i];
        match *layer {
            LayerSpec::Linear {
                in_features,
                out_features,
                bias,
            } => layers::linear_param_grad(in_features, out_features, bias, &trace.xs[i], gy, gp),
            LayerSpec::Conv2d { .. } => {
                ConvGeom::new(layer, self.shape(i), self.shape(i + 1)).param_grad(&trace.xs[i], gy, gp)
            }
            _ => {}
        }
    }

    /// Backpropagate an output cotangent through a recorded trace,
    /// accumulating the parameter gradient into `grad`.
    pub(crate) fn backward(&self, params: &[f64], trace: &ActivationTrace, g_out: Vec<f64>, grad: &mut [f64]) {
        let mut g = g_out;
        for i in (0..self.num_layers()).rev() {
            self.vjp_params(trace, i, &g, grad);
            if i > 0 {
                g = self.vjp_input(params, trace, i, &g);
            }
        }
    }
}

/// Summed loss over a batch.
pub fn loss_value(net: &Network, params: &[f64], batch: &Batch<'_>, loss: &LossModel) -> Result<f64> {
    let per: Vec<f64> = (0..batch.len())
        .into_par_iter()
        .map(|n| {
            let out = net.predict(params, batch.inputs[n])?;
            Ok(loss.value(&out, batch.targets[n]))
        })
        .collect::<Result<_>>()?;
    Ok(per.iter().sum())
}

/// Gradient of the summed per-example loss with respect to the parameters.
pub fn grad_params(net: &Network, params: &[f64], batch: &Batch<'_>, loss: &LossModel) -> Result<Vec<f64>> {
    Ok(loss_and_grad(net, params, batch, loss)?.1)
}

/// Summed loss and its parameter gradient in one pass.
pub(crate) fn loss_and_grad(
    net: &Network,
    params: &[f64],
    batch: &Batch<'_>,
    loss: &LossModel,
) -> Result<(f64, Vec<f64>)> {
    net.check_params(params)?;
    let w = net.num_params();
    let idx: Vec<usize> = (0..batch.len()).collect();
    let parts: Vec<(f64, Vec<f64>)> = idx
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut g = vec![0.0; w];
            let mut l = 0.0;
            for &n in chunk {
                let target = batch.targets[n];
                let trace = net.forward(params, batch.inputs[n])?;
                if target.len() != trace.output().len() {
                    return Err(Error::Shape(format!(
                        "target of length {} does not match output length {}",
                        target.len(),
                        trace.output().len()
                    )));
                }
                l += loss.value(trace.output(), target);
                let g_out = loss.gradient(trace.output(), target);
                net.backward(params, &trace, g_out, &mut g);
            }
            Ok((l, g))
        })
        .collect::<Result<_>>()?;
    let total: f64 = parts.iter().map(|p| p.0).sum();
    let grad = pairwise_sum(parts.into_iter().map(|p| p.1).collect(), w);
    Ok((total, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::ArchSpec;

    fn identity_linear() -> (Network, Vec<f64>) {
        let net = Network::new(ArchSpec {
            input_shape: vec![2],
            layers: vec![LayerSpec::linear(2, 2)],
            latent_index: 0,
        })
        .unwrap();
        (net, vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0])
    }

    #[test]
    fn identity_linear_forward() {
        let (net, p) = identity_linear();
        assert_eq!(net.predict(&p, &[1.0, 2.0]).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn tanh_of_zero() {
        let net = Network::new(ArchSpec {
            input_shape: vec![3],
            layers: vec![LayerSpec::Tanh],
            latent_index: 0,
        })
        .unwrap();
        assert_eq!(net.predict(&[], &[0.0; 3]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn perfect_reconstruction_has_zero_gradient() {
        let (net, p) = identity_linear();
        let x = [0.3, -0.7];
        let batch = Batch::autoencoding(vec![&x]);
        let g = grad_params(&net, &p, &batch, &LossModel::gaussian(1.0).unwrap()).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn scalar_quadratic_gradient() {
        let net = Network::new(ArchSpec {
            input_shape: vec![1],
            layers: vec![LayerSpec::Linear {
                in_features: 1,
                out_features: 1,
                bias: false,
            }],
            latent_index: 0,
        })
        .unwrap();
        let x = [1.0];
        let t = [0.0];
        let batch = Batch::supervised(vec![&x], vec![&t]).unwrap();
        let g = grad_params(&net, &[3.0], &batch, &LossModel::gaussian(1.0).unwrap()).unwrap();
        assert_eq!(g, vec![3.0]);
    }

    #[test]
    fn maxpool_ties_pick_first_index() {
        let net = Network::new(ArchSpec {
            input_shape: vec![1, 2, 2],
            layers: vec![LayerSpec::MaxPool2d { k: 2 }],
            latent_index: 0,
        })
        .unwrap();
        let t = net.forward(&[], &[1.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(t.argmax[0], Some(vec![0]));
        assert_eq!(t.output(), &[1.0]);
    }

    #[test]
    fn relu_derivative_at_zero_is_zero() {
        let net = Network::new(ArchSpec {
            input_shape: vec![2],
            layers: vec![LayerSpec::Relu],
            latent_index: 0,
        })
        .unwrap();
        let t = net.forward(&[], &[0.0, 1.0]).unwrap();
        assert_eq!(net.vjp_input(&[], &t, 0, &[1.0, 1.0]), vec![0.0, 1.0]);
    }

    #[test]
    fn input_length_is_checked() {
        let (net, p) = identity_linear();
        assert!(net.forward(&p, &[1.0]).is_err());
        assert!(net.forward(&p[..5], &[1.0, 2.0]).is_err());
        assert!(net.decode(&p, &[1.0]).is_err());
    }
}
