//! Single-layer steps of the curvature backpropagation.
//!
//! `M` on a layer output is pulled back to the layer input as
//! `J_x^T M J_x`, and the parameter block is `J_phi^T M J_phi`. Both sides of
//! each step may be held as a full matrix or as a diagonal; when a diagonal
//! is requested only `diag(J^T M J)` is formed.

use super::CurvatureState;
use crate::error::{Error, Result};
use crate::net::layers::{self, ConvGeom};
use crate::net::{ActivationTrace, LayerSpec, Network};

/// How a layer's input Jacobian acts, grouped by structure.
enum InputJacobian<'a> {
    Linear { w: &'a [f64], n_in: usize, n_out: usize },
    Conv { geom: ConvGeom, kernel: &'a [f64] },
    /// Diagonal Jacobian with the given entries.
    Elementwise(Vec<f64>),
    /// `y_o = x_{src[o]}`.
    Selection(Vec<usize>),
}

fn input_jacobian<'a>(net: &Network, params: &'a [f64], trace: &ActivationTrace, i: usize) -> InputJacobian<'a> {
    let layer = &net.layers()[i];
    let p = net.layer_params(i, params);
    match *layer {
        LayerSpec::Linear {
            in_features,
            out_features,
            ..
        } => InputJacobian::Linear {
            w: &p[..in_features * out_features],
            n_in: in_features,
            n_out: out_features,
        },
        LayerSpec::Conv2d { .. } => {
            let geom = ConvGeom::new(layer, net.shape(i), net.shape(i + 1));
            InputJacobian::Conv {
                kernel: &p[..geom.kernel_len()],
                geom,
            }
        }
        LayerSpec::Tanh => InputJacobian::Elementwise(trace.xs[i + 1].iter().map(|y| 1.0 - y * y).collect()),
        LayerSpec::Relu => {
            InputJacobian::Elementwise(trace.xs[i].iter().map(|x| if *x > 0.0 { 1.0 } else { 0.0 }).collect())
        }
        LayerSpec::MaxPool2d { .. } => {
            InputJacobian::Selection(trace.argmax[i].clone().expect("maxpool trace without argmax"))
        }
        LayerSpec::UpsampleNearest { factor } => {
            InputJacobian::Selection(layers::upsample_sources(net.shape(i), factor))
        }
        LayerSpec::Reshape { .. } => InputJacobian::Selection((0..net.size(i)).collect()),
    }
}

/// `M' = J_x^T M J_x` for layer `i`, returned as a full matrix when
/// `want_full`, otherwise as its diagonal.
pub fn backstep_input(
    net: &Network,
    params: &[f64],
    trace: &ActivationTrace,
    i: usize,
    m: &CurvatureState,
    want_full: bool,
) -> Result<CurvatureState> {
    let n_out = net.size(i + 1);
    let n_in = net.size(i);
    if m.dim() != n_out {
        return Err(Error::Shape(format!(
            "curvature of dimension {} does not match layer {i} output size {n_out}",
            m.dim()
        )));
    }
    let jac = input_jacobian(net, params, trace, i);
    Ok(match (m, want_full) {
        (CurvatureState::Full { data, .. }, true) => CurvatureState::Full {
            n: n_in,
            data: full_to_full(&jac, data, n_in, n_out),
        },
        (CurvatureState::Full { data, .. }, false) => {
            CurvatureState::Diagonal(full_to_diag(&jac, data, n_in, n_out))
        }
        (CurvatureState::Diagonal(d), true) => CurvatureState::Full {
            n: n_in,
            data: diag_to_full(&jac, d, n_in, n_out),
        },
        (CurvatureState::Diagonal(d), false) => CurvatureState::Diagonal(diag_to_diag(&jac, d, n_in)),
    })
}

/// `A = M W` for row-major `W: n_out x n_in`.
fn mat_times_w(m: &[f64], w: &[f64], n_in: usize, n_out: usize) -> Vec<f64> {
    let mut a = vec![0.0; n_out * n_in];
    for o in 0..n_out {
        let arow = &mut a[o * n_in..(o + 1) * n_in];
        for p in 0..n_out {
            let c = m[o * n_out + p];
            if c == 0.0 {
                continue;
            }
            for (av, wv) in arow.iter_mut().zip(&w[p * n_in..(p + 1) * n_in]) {
                *av += c * wv;
            }
        }
    }
    a
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

/// `U = M J` for a convolution, `U: n_out x n_in`.
fn conv_m_times_j(geom: &ConvGeom, kernel: &[f64], m: &[f64], n_in: usize, n_out: usize) -> Vec<f64> {
    let mut u = vec![0.0; n_out * n_in];
    for r in 0..n_out {
        // M is symmetric, so row r of M J is (J^T M[r, :])^T
        geom.correlate_transpose(kernel, &m[r * n_out..(r + 1) * n_out], &mut u[r * n_in..(r + 1) * n_in]);
    }
    u
}

/// `M' = J^T U` for a convolution given `U = (.) J` of shape `n_out x n_in`.
fn conv_jt_times(geom: &ConvGeom, kernel: &[f64], u: &[f64], n_in: usize, n_out: usize) -> Vec<f64> {
    let ut = transpose(u, n_out, n_in);
    let mut out = vec![0.0; n_in * n_in];
    for c in 0..n_in {
        geom.correlate_transpose(kernel, &ut[c * n_out..(c + 1) * n_out], &mut out[c * n_in..(c + 1) * n_in]);
    }
    out
}

fn full_to_full(jac: &InputJacobian<'_>, m: &[f64], n_in: usize, n_out: usize) -> Vec<f64> {
    match jac {
        InputJacobian::Linear { w, .. } => {
            let a = mat_times_w(m, w, n_in, n_out);
            let mut out = vec![0.0; n_in * n_in];
            for o in 0..n_out {
                let arow = &a[o * n_in..(o + 1) * n_in];
                let wrow = &w[o * n_in..(o + 1) * n_in];
                for (i, &wi) in wrow.iter().enumerate() {
                    if wi == 0.0 {
                        continue;
                    }
                    for (ov, av) in out[i * n_in..(i + 1) * n_in].iter_mut().zip(arow) {
                        *ov += wi * av;
                    }
                }
            }
            out
        }
        InputJacobian::Conv { geom, kernel } => {
            let u = conv_m_times_j(geom, kernel, m, n_in, n_out);
            conv_jt_times(geom, kernel, &u, n_in, n_out)
        }
        InputJacobian::Elementwise(d) => {
            let mut out = m.to_vec();
            for i in 0..n_in {
                for j in 0..n_in {
                    out[i * n_in + j] *= d[i] * d[j];
                }
            }
            out
        }
        InputJacobian::Selection(src) => {
            let mut out = vec![0.0; n_in * n_in];
            for (o, &so) in src.iter().enumerate() {
                for (p, &sp) in src.iter().enumerate() {
                    out[so * n_in + sp] += m[o * n_out + p];
                }
            }
            out
        }
    }
}

fn full_to_diag(jac: &InputJacobian<'_>, m: &[f64], n_in: usize, n_out: usize) -> Vec<f64> {
    match jac {
        InputJacobian::Linear { w, .. } => {
            let a = mat_times_w(m, w, n_in, n_out);
            let mut d = vec![0.0; n_in];
            for o in 0..n_out {
                for i in 0..n_in {
                    d[i] += w[o * n_in + i] * a[o * n_in + i];
                }
            }
            d
        }
        InputJacobian::Conv { geom, kernel } => {
            let u = conv_m_times_j(geom, kernel, m, n_in, n_out);
            let mut d = vec![0.0; n_in];
            let mut row = Vec::new();
            for o in 0..n_out {
                geom.input_row(o, &mut row);
                for &(j, k) in &row {
                    d[j] += kernel[k] * u[o * n_in + j];
                }
            }
            d
        }
        InputJacobian::Elementwise(dv) => (0..n_in).map(|i| dv[i] * dv[i] * m[i * n_in + i]).collect(),
        InputJacobian::Selection(src) => {
            let mut groups: Vec<Vec<usize>> = vec![Vec::new(); n_in];
            for (o, &s) in src.iter().enumerate() {
                groups[s].push(o);
            }
            groups
                .iter()
                .map(|g| {
                    g.iter()
                        .flat_map(|&o| g.iter().map(move |&p| (o, p)))
                        .map(|(o, p)| m[o * n_out + p])
                        .sum()
                })
                .collect()
        }
    }
}

fn diag_to_full(jac: &InputJacobian<'_>, m: &[f64], n_in: usize, n_out: usize) -> Vec<f64> {
    match jac {
        InputJacobian::Linear { w, .. } => {
            let mut out = vec![0.0; n_in * n_in];
            for o in 0..n_out {
                let wrow = &w[o * n_in..(o + 1) * n_in];
                for (i, &wi) in wrow.iter().enumerate() {
                    let c = m[o] * wi;
                    if c == 0.0 {
                        continue;
                    }
                    for (ov, wj) in out[i * n_in..(i + 1) * n_in].iter_mut().zip(wrow) {
                        *ov += c * wj;
                    }
                }
            }
            out
        }
        InputJacobian::Conv { geom, kernel } => {
            let mut u = vec![0.0; n_out * n_in];
            let mut row = Vec::new();
            for o in 0..n_out {
                geom.input_row(o, &mut row);
                for &(j, k) in &row {
                    u[o * n_in + j] += m[o] * kernel[k];
                }
            }
            conv_jt_times(geom, kernel, &u, n_in, n_out)
        }
        InputJacobian::Elementwise(d) => {
            let mut out = vec![0.0; n_in * n_in];
            for i in 0..n_in {
                out[i * n_in + i] = d[i] * d[i] * m[i];
            }
            out
        }
        InputJacobian::Selection(src) => {
            let mut out = vec![0.0; n_in * n_in];
            for (o, &s) in src.iter().enumerate() {
                out[s * n_in + s] += m[o];
            }
            out
        }
    }
}

fn diag_to_diag(jac: &InputJacobian<'_>, m: &[f64], n_in: usize) -> Vec<f64> {
    let mut d = vec![0.0; n_in];
    match jac {
        InputJacobian::Linear { w, n_in, n_out } => {
            for o in 0..*n_out {
                let mo = m[o];
                if mo == 0.0 {
                    continue;
                }
                for (dv, wv) in d.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                    *dv += mo * wv * wv;
                }
            }
        }
        InputJacobian::Conv { geom, kernel } => {
            // diagonal pulled back through a convolution is a transposed
            // convolution with the pointwise-squared kernel
            let sq: Vec<f64> = kernel.iter().map(|k| k * k).collect();
            geom.correlate_transpose(&sq, m, &mut d);
        }
        InputJacobian::Elementwise(dv) => {
            for i in 0..n_in {
                d[i] = dv[i] * dv[i] * m[i];
            }
        }
        InputJacobian::Selection(src) => {
            for (o, &s) in src.iter().enumerate() {
                d[s] += m[o];
            }
        }
    }
    d
}

/// Curvature of one parametric layer: `J_phi^T M J_phi`, either the full
/// `|phi| x |phi|` block or its diagonal.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerBlock {
    Full(Vec<f64>),
    Diagonal(Vec<f64>),
}

impl LayerBlock {
    pub fn diagonal(&self, len: usize) -> Vec<f64> {
        match self {
            LayerBlock::Full(b) => (0..len).map(|q| b[q * len + q]).collect(),
            LayerBlock::Diagonal(d) => d.clone(),
        }
    }
}

pub fn layer_param_curvature(
    net: &Network,
    trace: &ActivationTrace,
    i: usize,
    m: &CurvatureState,
    want_block: bool,
) -> Result<LayerBlock> {
    let layer = &net.layers()[i];
    if !layer.is_parametric() {
        return Err(Error::NotParametric(i));
    }
    let n_out = net.size(i + 1);
    if m.dim() != n_out {
        return Err(Error::Shape(format!(
            "curvature of dimension {} does not match layer {i} output size {n_out}",
            m.dim()
        )));
    }
    let plen = layer.param_count();
    let x = &trace.xs[i];
    Ok(match *layer {
        LayerSpec::Linear {
            in_features: n_in,
            out_features: _,
            bias,
        } => linear_param_curvature(x, n_in, n_out, bias, plen, m, want_block),
        LayerSpec::Conv2d { .. } => {
            let geom = ConvGeom::new(layer, net.shape(i), net.shape(i + 1));
            conv_param_curvature(&geom, x, n_out, plen, m, want_block)
        }
        _ => unreachable!(),
    })
}

fn linear_param_curvature(
    x: &[f64],
    n_in: usize,
    n_out: usize,
    bias: bool,
    plen: usize,
    m: &CurvatureState,
    want_block: bool,
) -> LayerBlock {
    // parameter (o, i) sits at o * n_in + i; bias o at n_out * n_in + o.
    // The Jacobian row of output o is x~ = [x, 1] placed on those slots.
    let idx = |o: usize, i: usize| if i < n_in { o * n_in + i } else { n_out * n_in + o };
    let ext = n_in + usize::from(bias);
    let xt = |i: usize| if i < n_in { x[i] } else { 1.0 };
    let m_at = |o: usize, p: usize| -> f64 {
        match m {
            CurvatureState::Full { data, n } => data[o * n + p],
            CurvatureState::Diagonal(d) => {
                if o == p {
                    d[o]
                } else {
                    0.0
                }
            }
        }
    };
    if !want_block {
        let mut d = vec![0.0; plen];
        for o in 0..n_out {
            let moo = m_at(o, o);
            for i in 0..ext {
                let v = xt(i);
                d[idx(o, i)] = moo * v * v;
            }
        }
        return LayerBlock::Diagonal(d);
    }
    let mut h = vec![0.0; plen * plen];
    for o in 0..n_out {
        for p in 0..n_out {
            let mop = m_at(o, p);
            if mop == 0.0 {
                continue;
            }
            for i in 0..ext {
                let ci = mop * xt(i);
                let row = idx(o, i) * plen;
                for j in 0..ext {
                    h[row + idx(p, j)] += ci * xt(j);
                }
            }
        }
    }
    LayerBlock::Full(h)
}

fn conv_param_curvature(
    geom: &ConvGeom,
    x: &[f64],
    n_out: usize,
    plen: usize,
    m: &CurvatureState,
    want_block: bool,
) -> LayerBlock {
    let mut row = Vec::new();
    match m {
        CurvatureState::Diagonal(md) => {
            if want_block {
                let mut h = vec![0.0; plen * plen];
                for (o, &mo) in md.iter().enumerate() {
                    if mo == 0.0 {
                        continue;
                    }
                    geom.param_row(x, o, &mut row);
                    for &(q, v) in &row {
                        for &(q2, v2) in &row {
                            h[q * plen + q2] += mo * v * v2;
                        }
                    }
                }
                LayerBlock::Full(h)
            } else {
                let mut d = vec![0.0; plen];
                for (o, &mo) in md.iter().enumerate() {
                    geom.param_row(x, o, &mut row);
                    for &(q, v) in &row {
                        d[q] += mo * v * v;
                    }
                }
                LayerBlock::Diagonal(d)
            }
        }
        CurvatureState::Full { data, .. } => {
            // V^T = (M J_phi)^T stored as plen x n_out
            let mut vt = vec![0.0; plen * n_out];
            for o2 in 0..n_out {
                geom.param_row(x, o2, &mut row);
                let mrow = &data[o2 * n_out..(o2 + 1) * n_out];
                for &(q, v) in &row {
                    if v == 0.0 {
                        continue;
                    }
                    for (t, mv) in vt[q * n_out..(q + 1) * n_out].iter_mut().zip(mrow) {
                        *t += v * mv;
                    }
                }
            }
            if want_block {
                let mut h = vec![0.0; plen * plen];
                for o in 0..n_out {
                    geom.param_row(x, o, &mut row);
                    for &(q, v) in &row {
                        for q2 in 0..plen {
                            h[q * plen + q2] += v * vt[q2 * n_out + o];
                        }
                    }
                }
                LayerBlock::Full(h)
            } else {
                let mut d = vec![0.0; plen];
                for o in 0..n_out {
                    geom.param_row(x, o, &mut row);
                    for &(q, v) in &row {
                        d[q] += v * vt[q * n_out + o];
                    }
                }
                LayerBlock::Diagonal(d)
            }
        }
    }
}
