//! Brute-force reference curvature for small networks.
//!
//! Every layer Jacobian is materialized as a dense matrix with its own
//! loops, sharing no code with the forward kernels. Explicit matrix
//! products assemble the end-to-end parameter Jacobian `J_theta f`; each
//! block is then `J_p^T H_out J_p` with the full output Hessian.

#![allow(clippy::needless_range_loop)]

use crate::error::{Error, Result};
use crate::loss::{softmax, LossModel};
use crate::net::{LayerSpec, Network};

/// Largest parameter count the oracle accepts.
pub const ORACLE_MAX_PARAMS: usize = 5000;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Dense {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    fn at(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }

    pub fn matmul(&self, other: &Dense) -> Dense {
        assert_eq!(self.cols, other.rows);
        let mut out = Dense::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += a * other.data[k * other.cols + j];
                }
            }
        }
        out
    }

    pub fn transpose(&self) -> Dense {
        let mut out = Dense::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.get(i, j);
            }
        }
        out
    }

    /// `A^T H A`.
    pub fn sandwich(&self, h: &Dense) -> Dense {
        self.transpose().matmul(&h.matmul(self))
    }
}

/// Reference result for one example.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    /// `(layer index, |phi| x |phi| block)` for every parametric layer.
    pub blocks: Vec<(usize, Dense)>,
    /// End-to-end `J_theta f`, `output_dim x W_s`.
    pub jacobian: Dense,
    /// Full output Hessian used for the blocks.
    pub output_hessian: Dense,
}

impl OracleResult {
    /// Concatenated block diagonals in parameter layout.
    pub fn diagonal(&self) -> Vec<f64> {
        let mut d = Vec::new();
        for (_, b) in &self.blocks {
            d.extend((0..b.rows).map(|i| b.get(i, i)));
        }
        d
    }
}

/// Dense output Hessian of the loss.
pub fn output_hessian_dense(loss: &LossModel, out: &[f64]) -> Dense {
    let n = out.len();
    let mut h = Dense::zeros(n, n);
    match *loss {
        LossModel::GaussianMse { sigma_d } => {
            for i in 0..n {
                *h.at(i, i) = 1.0 / (sigma_d * sigma_d);
            }
        }
        LossModel::Bernoulli => {
            let pi = softmax(out);
            for i in 0..n {
                for j in 0..n {
                    *h.at(i, j) = if i == j { pi[i] } else { 0.0 } - pi[i] * pi[j];
                }
            }
        }
    }
    h
}

fn conv_coord(o: usize, a: usize, stride: usize, pad: usize, n: usize) -> Option<usize> {
    let p = (o * stride + a) as isize - pad as isize;
    (p >= 0 && (p as usize) < n).then_some(p as usize)
}

/// Dense `(J_x, J_phi)` of layer `i` at input `x` (and output `y`).
pub fn layer_jacobians(
    net: &Network,
    params: &[f64],
    i: usize,
    x: &[f64],
    y: &[f64],
    argmax: Option<&[usize]>,
) -> (Dense, Dense) {
    let n_in = net.size(i);
    let n_out = net.size(i + 1);
    let layer = &net.layers()[i];
    let plen = layer.param_count();
    let p: &[f64] = match net.layout().slot_for_layer(i) {
        Some(s) => &params[s.offset..s.offset + s.len],
        None => &[],
    };
    let mut jx = Dense::zeros(n_out, n_in);
    let mut jp = Dense::zeros(n_out, plen);
    match *layer {
        LayerSpec::Linear {
            in_features,
            out_features,
            bias,
        } => {
            for o in 0..out_features {
                for q in 0..in_features {
                    *jx.at(o, q) = p[o * in_features + q];
                    *jp.at(o, o * in_features + q) = x[q];
                }
                if bias {
                    *jp.at(o, out_features * in_features + o) = 1.0;
                }
            }
        }
        LayerSpec::Conv2d {
            in_ch,
            out_ch,
            kh,
            kw,
            stride,
            padding,
            bias,
        } => {
            let (ih_n, iw_n) = (net.shape(i)[1], net.shape(i)[2]);
            let (oh_n, ow_n) = (net.shape(i + 1)[1], net.shape(i + 1)[2]);
            for co in 0..out_ch {
                for oh in 0..oh_n {
                    for ow in 0..ow_n {
                        let o = (co * oh_n + oh) * ow_n + ow;
                        for ci in 0..in_ch {
                            for a in 0..kh {
                                for b in 0..kw {
                                    let (Some(ih), Some(iw)) = (
                                        conv_coord(oh, a, stride, padding, ih_n),
                                        conv_coord(ow, b, stride, padding, iw_n),
                                    ) else {
                                        continue;
                                    };
                                    let q = (ci * ih_n + ih) * iw_n + iw;
                                    let widx = ((co * in_ch + ci) * kh + a) * kw + b;
                                    *jx.at(o, q) += p[widx];
                                    *jp.at(o, widx) += x[q];
                                }
                            }
                        }
                        if bias {
                            *jp.at(o, out_ch * in_ch * kh * kw + co) = 1.0;
                        }
                    }
                }
            }
        }
        LayerSpec::Tanh => {
            for q in 0..n_in {
                *jx.at(q, q) = 1.0 - y[q] * y[q];
            }
        }
        LayerSpec::Relu => {
            for q in 0..n_in {
                *jx.at(q, q) = if x[q] > 0.0 { 1.0 } else { 0.0 };
            }
        }
        LayerSpec::MaxPool2d { .. } => {
            let arg = argmax.expect("maxpool requires argmax");
            for (o, &s) in arg.iter().enumerate() {
                *jx.at(o, s) = 1.0;
            }
        }
        LayerSpec::UpsampleNearest { factor } => {
            let s = net.shape(i);
            let (c, h, w) = (s[0], s[1], s[2]);
            for ch in 0..c {
                for oh in 0..h * factor {
                    for ow in 0..w * factor {
                        let o = (ch * h * factor + oh) * w * factor + ow;
                        *jx.at(o, (ch * h + oh / factor) * w + ow / factor) = 1.0;
                    }
                }
            }
        }
        LayerSpec::Reshape { .. } => jx = Dense::identity(n_in),
    }
    (jx, jp)
}

/// Reference GGN blocks and end-to-end parameter Jacobian for one example.
pub fn ggn_oracle(net: &Network, params: &[f64], x: &[f64], loss: &LossModel) -> Result<OracleResult> {
    if net.num_params() > ORACLE_MAX_PARAMS {
        return Err(Error::OracleGuard {
            params: net.num_params(),
            limit: ORACLE_MAX_PARAMS,
        });
    }
    let trace = net.forward(params, x)?;
    let l = net.num_layers();
    let n_out = net.output_dim();
    let h = output_hessian_dense(loss, trace.output());
    let mut chain = Dense::identity(n_out);
    let mut jacobian = Dense::zeros(n_out, net.num_params());
    let mut blocks = Vec::new();
    for k in (0..l).rev() {
        let (jx, jp) = layer_jacobians(
            net,
            params,
            k,
            &trace.xs[k],
            &trace.xs[k + 1],
            trace.argmax[k].as_deref(),
        );
        if let Some(slot) = net.layout().slot_for_layer(k) {
            let jfull = chain.matmul(&jp);
            for r in 0..n_out {
                for c in 0..slot.len {
                    jacobian.data[r * net.num_params() + slot.offset + c] = jfull.get(r, c);
                }
            }
            blocks.push((k, jfull.sandwich(&h)));
        }
        chain = chain.matmul(&jx);
    }
    blocks.reverse();
    Ok(OracleResult {
        blocks,
        jacobian,
        output_hessian: h,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::ArchSpec;

    #[test]
    fn two_parameter_identity_case_by_hand() {
        // f(x) = w x + b on a scalar; J = [x, 1]; H = sigma^-2 [[x^2, x], [x, 1]]
        let net = Network::new(ArchSpec {
            input_shape: vec![1],
            layers: vec![LayerSpec::linear(1, 1)],
            latent_index: 0,
        })
        .unwrap();
        let r = ggn_oracle(&net, &[1.0, 0.0], &[3.0], &LossModel::gaussian(0.5).unwrap()).unwrap();
        let b = &r.blocks[0].1;
        assert_eq!(b.data, vec![36.0, 12.0, 12.0, 4.0]);
    }

    #[test]
    fn non_parametric_net_is_empty() {
        let net = Network::new(ArchSpec {
            input_shape: vec![3],
            layers: vec![LayerSpec::Tanh, LayerSpec::Relu],
            latent_index: 0,
        })
        .unwrap();
        let r = ggn_oracle(&net, &[], &[0.1, -0.2, 0.3], &LossModel::gaussian(1.0).unwrap()).unwrap();
        assert!(r.blocks.is_empty());
        assert_eq!(r.jacobian.cols, 0);
    }

    #[test]
    fn size_guard() {
        let net = Network::new(ArchSpec {
            input_shape: vec![100],
            layers: vec![LayerSpec::linear(100, 60)],
            latent_index: 0,
        })
        .unwrap();
        let p = vec![0.0; net.num_params()];
        let r = ggn_oracle(&net, &p, &[0.0; 100], &LossModel::gaussian(1.0).unwrap());
        assert!(matches!(r, Err(Error::OracleGuard { .. })));
    }
}
