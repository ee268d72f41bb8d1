//! Generalized Gauss-Newton curvature by backpropagating the output-loss
//! Hessian `M` through the layer Jacobians.
//!
//! Starting from `M = d^2 L / d x_l^2`, each layer `k` (last to first)
//! contributes its parameter block `J_phi^T M J_phi` and then replaces `M` by
//! `J_x^T M J_x`. The [`HessianMode`] chooses whether `M` is carried as a
//! full matrix or only as its diagonal, and whether parameter blocks are
//! kept whole or reduced to their diagonal:
//!
//! | mode            | `M` carried          | parameter result |
//! |-----------------|----------------------|------------------|
//! | `BlockDiagonal` | full                 | full blocks      |
//! | `ExactDiagonal` | full                 | block diagonals  |
//! | `ApproxDiagonal`| diagonal             | diagonals        |
//! | `MixedDiagonal` | full while `|x_k| <= dim_threshold`, else diagonal | diagonals |
//!
//! Curvature is computed per example and summed over the batch.

mod backstep;
pub mod oracle;

pub use backstep::{backstep_input, layer_param_curvature, LayerBlock};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{softmax, LossModel};
use crate::net::{Batch, LayerSpec, Network};
use crate::tensor::pairwise_sum;

pub const DEFAULT_GUARD_FLOATS: u64 = 200_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum HessianMode {
    BlockDiagonal,
    ExactDiagonal,
    ApproxDiagonal,
    MixedDiagonal { dim_threshold: usize },
}

impl HessianMode {
    /// Whether `M` on an activation of `size` entries is carried in full.
    pub fn full_at(&self, size: usize) -> bool {
        match *self {
            HessianMode::BlockDiagonal | HessianMode::ExactDiagonal => true,
            HessianMode::ApproxDiagonal => false,
            HessianMode::MixedDiagonal { dim_threshold } => size <= dim_threshold,
        }
    }

    pub fn keeps_blocks(&self) -> bool {
        matches!(self, HessianMode::BlockDiagonal)
    }

    pub fn name(&self) -> &'static str {
        match self {
            HessianMode::BlockDiagonal => "block",
            HessianMode::ExactDiagonal => "exact",
            HessianMode::ApproxDiagonal => "approx",
            HessianMode::MixedDiagonal { .. } => "mixed",
        }
    }

    /// Parse `block|exact|approx|mixed`; `mixed` uses `mixed_threshold`.
    pub fn parse(s: &str, mixed_threshold: usize) -> Result<Self> {
        match s {
            "block" => Ok(HessianMode::BlockDiagonal),
            "exact" => Ok(HessianMode::ExactDiagonal),
            "approx" => Ok(HessianMode::ApproxDiagonal),
            "mixed" => Ok(HessianMode::MixedDiagonal {
                dim_threshold: mixed_threshold,
            }),
            other => Err(Error::InvalidArgument(format!(
                "unknown Hessian mode `{other}` (expected block|exact|approx|mixed)"
            ))),
        }
    }
}

/// The backpropagated intermediate `M` on one activation.
#[derive(Debug, Clone, PartialEq)]
pub enum CurvatureState {
    /// Row-major symmetric `n x n` matrix.
    Full { n: usize, data: Vec<f64> },
    Diagonal(Vec<f64>),
}

impl CurvatureState {
    pub fn dim(&self) -> usize {
        match self {
            CurvatureState::Full { n, .. } => *n,
            CurvatureState::Diagonal(d) => d.len(),
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        match self {
            CurvatureState::Full { n, data } => (0..*n).map(|i| data[i * n + i]).collect(),
            CurvatureState::Diagonal(d) => d.clone(),
        }
    }

    pub fn into_full(self) -> CurvatureState {
        match self {
            CurvatureState::Diagonal(d) => {
                let n = d.len();
                let mut data = vec![0.0; n * n];
                for (i, v) in d.into_iter().enumerate() {
                    data[i * n + i] = v;
                }
                CurvatureState::Full { n, data }
            }
            full => full,
        }
    }

    pub fn into_diagonal(self) -> CurvatureState {
        match self {
            CurvatureState::Full { .. } => CurvatureState::Diagonal(self.diagonal()),
            d => d,
        }
    }

    pub fn float_count(&self) -> usize {
        match self {
            CurvatureState::Full { n, .. } => n * n,
            CurvatureState::Diagonal(d) => d.len(),
        }
    }
}

/// Hessian of the loss with respect to the network output. Gaussian:
/// `sigma_d^-2 I` (always diagonal). Bernoulli: `diag(pi) - pi pi^T` with
/// `pi = softmax(x_rec)`, or `pi (1 - pi)` when only the diagonal is wanted.
pub fn loss_output_hessian(loss: &LossModel, x_rec: &[f64], diagonal_only: bool) -> CurvatureState {
    match *loss {
        LossModel::GaussianMse { sigma_d } => {
            let d = vec![1.0 / (sigma_d * sigma_d); x_rec.len()];
            if diagonal_only {
                CurvatureState::Diagonal(d)
            } else {
                CurvatureState::Diagonal(d).into_full()
            }
        }
        LossModel::Bernoulli => {
            let pi = softmax(x_rec);
            if diagonal_only {
                CurvatureState::Diagonal(pi.iter().map(|p| p * (1.0 - p)).collect())
            } else {
                let n = pi.len();
                let mut data = vec![0.0; n * n];
                for i in 0..n {
                    for j in 0..n {
                        data[i * n + j] = if i == j { pi[i] } else { 0.0 } - pi[i] * pi[j];
                    }
                }
                CurvatureState::Full { n, data }
            }
        }
    }
}

/// Curvature of one parametric layer, summed over the batch.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCurvature {
    pub layer: usize,
    pub offset: usize,
    pub len: usize,
    /// Full `len x len` block, present in block mode only.
    pub block: Option<Vec<f64>>,
    pub diagonal: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurvatureResult {
    pub mode: HessianMode,
    pub layers: Vec<LayerCurvature>,
    /// Concatenated per-layer diagonals in parameter-vector layout.
    pub diagonal: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvatureOptions {
    /// Largest analytic float allocation allowed for one curvature pass.
    pub guard_floats: u64,
}

impl Default for CurvatureOptions {
    fn default() -> Self {
        Self {
            guard_floats: DEFAULT_GUARD_FLOATS,
        }
    }
}

fn state_floats(size: u64, full: bool) -> u64 {
    if full {
        size * size
    } else {
        size
    }
}

/// Peak number of floats a single-example curvature pass allocates:
/// activations, the two `M` states live during each backstep plus its
/// temporaries, and the stored results.
pub fn estimate_floats(net: &Network, mode: HessianMode) -> u64 {
    let l = net.num_layers();
    let trace = net.total_feature_size() as u64;
    let mut results = 0u64;
    let mut peak_step = 0u64;
    let out_full = mode.full_at(net.size(l));
    let mut cur_full = out_full;
    for k in (0..l).rev() {
        let layer = &net.layers()[k];
        let n_out = net.size(k + 1) as u64;
        let n_in = net.size(k) as u64;
        let plen = layer.param_count() as u64;
        let mut step = state_floats(n_out, cur_full);
        if plen > 0 {
            let block = if mode.keeps_blocks() { plen * plen } else { plen };
            results += block;
            let temp = match layer {
                LayerSpec::Conv2d { .. } if cur_full => plen * n_out,
                _ => 0,
            };
            peak_step = peak_step.max(step + block + temp);
        }
        if k > 0 {
            let next_full = mode.full_at(n_in as usize);
            let temp = match layer {
                LayerSpec::Linear { .. } if cur_full => n_out * n_in,
                LayerSpec::Conv2d { .. } if cur_full && next_full => 2 * n_out * n_in,
                LayerSpec::Conv2d { .. } if cur_full || next_full => n_out * n_in,
                _ => 0,
            };
            step += state_floats(n_in, next_full) + temp;
            peak_step = peak_step.max(step);
            cur_full = next_full;
        }
    }
    let aggregate = net.num_params() as u64;
    trace + results + aggregate + peak_step
}

/// Per-example curvature, flattened: concatenated blocks in block mode,
/// otherwise the diagonal in parameter layout.
fn example_curvature(
    net: &Network,
    params: &[f64],
    input: &[f64],
    mode: HessianMode,
    loss: &LossModel,
    out: &mut [f64],
) -> Result<()> {
    let trace = net.forward(params, input)?;
    let l = net.num_layers();
    let mut m = loss_output_hessian(loss, trace.output(), !mode.full_at(net.size(l)));
    for k in (0..l).rev() {
        if let Some(slot) = net.layout().slot_for_layer(k).copied() {
            let b = layer_param_curvature(net, &trace, k, &m, mode.keeps_blocks())?;
            match b {
                LayerBlock::Full(h) => {
                    let start = block_offset(net, k);
                    for (o, v) in out[start..start + h.len()].iter_mut().zip(&h) {
                        *o += v;
                    }
                }
                LayerBlock::Diagonal(d) => {
                    for (o, v) in out[slot.offset..slot.offset + slot.len].iter_mut().zip(&d) {
                        *o += v;
                    }
                }
            }
        }
        if k > 0 {
            m = backstep_input(net, params, &trace, k, &m, mode.full_at(net.size(k)))?;
        }
    }
    Ok(())
}

/// Start of layer `k`'s block in the concatenated block storage.
fn block_offset(net: &Network, k: usize) -> usize {
    net.layout()
        .slots()
        .iter()
        .take_while(|s| s.layer != k)
        .map(|s| s.len * s.len)
        .sum()
}

/// GGN curvature of the summed loss over `batch`, with the default memory
/// guard.
pub fn ggn_backprop(
    net: &Network,
    params: &[f64],
    batch: &Batch<'_>,
    mode: HessianMode,
    loss: &LossModel,
) -> Result<CurvatureResult> {
    ggn_backprop_with(net, params, batch, mode, loss, &CurvatureOptions::default())
}

pub fn ggn_backprop_with(
    net: &Network,
    params: &[f64],
    batch: &Batch<'_>,
    mode: HessianMode,
    loss: &LossModel,
    opts: &CurvatureOptions,
) -> Result<CurvatureResult> {
    net.check_params(params)?;
    let needed = estimate_floats(net, mode);
    if needed > opts.guard_floats {
        return Err(Error::MemoryGuard {
            needed,
            limit: opts.guard_floats,
        });
    }
    let flat_len = if mode.keeps_blocks() {
        net.layout().slots().iter().map(|s| s.len * s.len).sum()
    } else {
        net.num_params()
    };
    let idx: Vec<usize> = (0..batch.len()).collect();
    let parts: Vec<Vec<f64>> = idx
        .par_chunks(crate::net::CHUNK)
        .map(|chunk| {
            let mut acc = vec![0.0; flat_len];
            for &n in chunk {
                example_curvature(net, params, batch.inputs[n], mode, loss, &mut acc)?;
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let flat = pairwise_sum(parts, flat_len);
    Ok(unflatten(net, mode, flat))
}

fn unflatten(net: &Network, mode: HessianMode, flat: Vec<f64>) -> CurvatureResult {
    let slots = net.layout().slots();
    if mode.keeps_blocks() {
        let mut layers = Vec::with_capacity(slots.len());
        let mut diagonal = vec![0.0; net.num_params()];
        let mut off = 0;
        for s in slots {
            let block = flat[off..off + s.len * s.len].to_vec();
            off += s.len * s.len;
            let diag: Vec<f64> = (0..s.len).map(|q| block[q * s.len + q]).collect();
            diagonal[s.offset..s.offset + s.len].copy_from_slice(&diag);
            layers.push(LayerCurvature {
                layer: s.layer,
                offset: s.offset,
                len: s.len,
                block: Some(block),
                diagonal: diag,
            });
        }
        CurvatureResult {
            mode,
            layers,
            diagonal,
        }
    } else {
        let layers = slots
            .iter()
            .map(|s| LayerCurvature {
                layer: s.layer,
                offset: s.offset,
                len: s.len,
                block: None,
                diagonal: flat[s.offset..s.offset + s.len].to_vec(),
            })
            .collect();
        CurvatureResult {
            mode,
            layers,
            diagonal: flat,
        }
    }
}
